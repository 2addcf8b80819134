"""Named trainable parameters and the checkpoint format.

Checkpoints are line-delimited text: ``path shape base64(f32 data)`` with
shape as comma-separated extents. Payloads are little-endian f32, so a
save/load/save cycle is byte-identical.
"""

from __future__ import annotations

import base64

import numpy as np

from .tensor import Tensor


class ModelParams:
    """Ordered name -> Tensor map; enumeration order is construction order."""

    def __init__(self, tensors=None):
        self._tensors: dict[str, Tensor] = {}
        if tensors:
            for path, t in tensors.items():
                self.add(path, t)

    def add(self, path, tensor):
        if path in self._tensors:
            raise ValueError(f"duplicate parameter path '{path}'")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        tensor.requires_grad = True
        self._tensors[path] = tensor
        return tensor

    def __getitem__(self, path):
        return self._tensors[path]

    def __contains__(self, path):
        return path in self._tensors

    def __len__(self):
        return len(self._tensors)

    def paths(self):
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def astype(self, dtype):
        out = ModelParams()
        for path, t in self.items():
            out.add(path, Tensor(t.data.astype(dtype), requires_grad=True))
        return out

    def copy(self):
        out = ModelParams()
        for path, t in self.items():
            out.add(path, Tensor(t.data.copy(), requires_grad=True))
        return out

    def gradient_map(self, grads):
        """Resolve a backward() result to {path: array}; unreached parameters
        get zero gradients."""
        out = {}
        for path, t in self.items():
            g = grads.get(t)
            out[path] = np.zeros_like(t.data) if g is None else g
        return out

    def save(self, path):
        with open(path, "w", encoding="ascii") as fh:
            for name, t in self.items():
                data = np.ascontiguousarray(t.data, dtype="<f4")
                shape = ",".join(str(s) for s in t.shape)
                payload = base64.b64encode(data.tobytes()).decode("ascii")
                fh.write(f"{name} {shape} {payload}\n")

    @classmethod
    def load(cls, path):
        params = cls()
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    name, shape_s, payload = line.split(" ")
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed checkpoint line") from exc
                shape = tuple(int(s) for s in shape_s.split(","))
                data = np.frombuffer(base64.b64decode(payload), dtype="<f4").reshape(shape)
                params.add(name, Tensor(data.copy(), requires_grad=True))
        return params
