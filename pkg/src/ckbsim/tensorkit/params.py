from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParameterSet:
    """Named arrays of a module (parameters and buffers) plus optional
    optimizer moments, in the form persisted by checkpoints."""

    tensors: dict = field(default_factory=dict)
    optimizer: dict | None = None

    @classmethod
    def capture(cls, module, optimizer=None):
        return cls(module.state_dict(), optimizer.state_dict() if optimizer is not None else None)

    def restore(self, module, optimizer=None, strict=True):
        module.load_state_dict(self.tensors, strict=strict)
        if optimizer is not None and self.optimizer is not None:
            optimizer.load_state_dict(self.optimizer)
        return module

    def names(self):
        return list(self.tensors)

    def equals(self, other):
        """Bitwise equality of names, dtypes, shapes and values."""
        def same(a, b):
            if a.keys() != b.keys():
                return False
            return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
                       and a[k].tobytes() == b[k].tobytes() for k in a)

        if not same(self.tensors, other.tensors):
            return False
        if (self.optimizer is None) != (other.optimizer is None):
            return False
        return self.optimizer is None or same(self.optimizer, other.optimizer)
