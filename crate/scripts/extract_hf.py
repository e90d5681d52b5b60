#!/usr/bin/env python3
"""External adapter for layerprobe backed by a Hugging Face wav2vec 2.0 checkpoint.

Invoked by layerprobe as `extract_hf.py [options] --input <wav> --output <file>`.
Reads the mono float WAV, runs the frozen model and writes the outputs of every
transformer block as an LPEMB1 raw embedding file (L x D x T, little-endian f32).

Example adapter entry in an experiment config:

    [adapter]
    kind = "external"
    model_id = "w2v2-large"
    command = ["python3", "scripts/extract_hf.py", "--model", "facebook/wav2vec2-large"]
    num_layers = 24
    hidden_dim = 1024
"""

import argparse
import struct
import sys

import numpy as np
from scipy.io import wavfile

MAGIC = b"LPEMB1"
KIND_RAW = 0
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = 0xFFFFFFFFFFFFFFFF

try:
    from numba import njit

    @njit(cache=True)
    def _fnv_numba(data):
        h = np.uint64(FNV_OFFSET)
        prime = np.uint64(FNV_PRIME)
        for b in data:
            h = (h ^ np.uint64(b)) * prime
        return h

    def fnv1a64(body):
        return int(_fnv_numba(np.frombuffer(body, dtype=np.uint8)))

except ImportError:

    def fnv1a64(body):
        h = FNV_OFFSET
        for b in body:
            h = ((h ^ b) * FNV_PRIME) & MASK
        return h


def encode_raw(states):
    """`states` has shape (L, D, T)."""
    layers, dim, frames = states.shape
    body = np.ascontiguousarray(states, dtype="<f4").tobytes()
    header = MAGIC + struct.pack("<BIIIQ", KIND_RAW, layers, dim, frames, fnv1a64(body))
    return header + body


def hidden_states(model_name, waveform, rate, device):
    import torch
    from transformers import AutoFeatureExtractor, Wav2Vec2Model

    extractor = AutoFeatureExtractor.from_pretrained(model_name)
    model = Wav2Vec2Model.from_pretrained(model_name).to(device).eval()
    inputs = extractor(waveform, sampling_rate=rate, return_tensors="pt")
    with torch.no_grad():
        out = model(inputs.input_values.to(device), output_hidden_states=True)
    # index 0 is the input to the first block; the rest are block outputs
    blocks = [h[0].transpose(0, 1).cpu().numpy() for h in out.hidden_states[1:]]
    return np.stack(blocks)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--model", required=True, help="checkpoint name or local path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--input", required=True)
    parser.add_argument("--output", required=True)
    args = parser.parse_args()

    rate, waveform = wavfile.read(args.input)
    if waveform.ndim != 1:
        sys.exit("expected a mono WAV")
    states = hidden_states(args.model, waveform.astype(np.float32), rate, args.device)
    with open(args.output, "wb") as f:
        f.write(encode_raw(states))


if __name__ == "__main__":
    main()
