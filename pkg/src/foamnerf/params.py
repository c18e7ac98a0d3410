"""Named views into flat parameter vectors.

A Packer maps parameter names to slices of one flat float64 vector so
optimizers and samplers see a single array while model code sees shaped
matrices.  unpack() keeps leading batch dimensions, so a (B, D) stack of
vectors unpacks to (B, ...) shaped parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class Packer:
    def __init__(self, specs: list[tuple[str, tuple[int, ...]]]):
        self.specs = [(name, tuple(shape)) for name, shape in specs]
        self.offsets = {}
        total = 0
        for name, shape in self.specs:
            n = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (total, total + n, shape)
            total += n
        self.size = total

    def unpack(self, vector):
        shape = vector.shape if isinstance(vector, ad.Var) else np.shape(vector)
        if shape[-1] != self.size:
            raise ValueError(f"vector last axis {shape[-1]}, packer expects {self.size}")
        lead = tuple(shape[:-1])
        out = {}
        for name, (lo, hi, pshape) in self.offsets.items():
            piece = ad.slice_last(vector, lo, hi)
            out[name] = ad.reshape(piece, lead + pshape)
        return out

    def pack(self, arrays: dict) -> np.ndarray:
        pieces = []
        for name, (lo, hi, pshape) in self.offsets.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != pshape:
                raise ValueError(f"{name}: shape {a.shape}, expected {pshape}")
            pieces.append(a.reshape(-1))
        return np.concatenate(pieces) if pieces else np.zeros(0)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)
