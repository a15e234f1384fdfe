"""Named parameter arrays backed by one contiguous float64 buffer."""
import numpy as np

from .tensor import Tensor, Tape


class ParameterSet:
    """Ordered named arrays living as views into ``self.flat``.

    Gradients live in ``self.flat_grad`` with the same layout, so the
    optimizer runs one fused kernel over the whole model.
    """

    def __init__(self, arrays):
        self.names = list(arrays)
        self.shapes = {k: tuple(np.shape(v)) for k, v in arrays.items()}
        sizes = [int(np.prod(self.shapes[k], dtype=np.int64)) for k in self.names]
        self.offsets = dict(zip(self.names, np.cumsum([0] + sizes[:-1]).tolist()))
        total = int(sum(sizes))
        self.flat = np.zeros(total)
        self.flat_grad = np.zeros(total)
        self.tensors = {}
        for name, size in zip(self.names, sizes):
            off = self.offsets[name]
            view = self.flat[off:off + size].reshape(self.shapes[name])
            view[...] = np.asarray(arrays[name], dtype=np.float64)
            t = Tensor.__new__(Tensor)
            t.data = view
            t.grad = self.flat_grad[off:off + size].reshape(self.shapes[name])
            t.requires_grad = True
            t.is_leaf = True
            t.tape = None
            t.name = name
            self.tensors[name] = t

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return self.flat.size

    def bind(self, tape=None):
        """Fresh tape for a forward pass; gradients are zeroed."""
        tape = Tape() if tape is None else tape
        self.flat_grad[:] = 0.0
        for t in self.tensors.values():
            t.tape = tape
        return tape

    def detach(self):
        for t in self.tensors.values():
            t.tape = None

    def arrays(self):
        """Independent copies of every array, in declaration order."""
        return {k: self.tensors[k].data.copy() for k in self.names}

    def grads(self):
        return {k: self.tensors[k].grad.copy() for k in self.names}
