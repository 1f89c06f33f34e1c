"""Parameter container shared by the two networks."""
from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .tensor import Tensor


class Model:
    """Holds named parameters in a fixed order.

    Subclasses call :meth:`add_param` while building the architecture; the
    insertion order is the order checkpoints are written in.
    """

    kind = "model"

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def add_param(self, name: str, shape) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())
