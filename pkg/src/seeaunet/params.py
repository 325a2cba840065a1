"""Named, ordered parameter collection with trainable flags."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool

    @property
    def size(self) -> int:
        return self.tensor.size


class ParameterStore:
    """Ordered mapping of hierarchical names (``enc1.conv1.weight``) to tensors.

    Trainable entries are leaves with ``requires_grad=True``; batch-norm running
    statistics are stored as non-trainable entries.
    """

    def __init__(self):
        self._entries: dict[str, Parameter] = {}

    def add(self, name: str, data, trainable: bool = True, dtype=np.float32) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(data, dtype=dtype), requires_grad=trainable, name=name)
        self._entries[name] = Parameter(name, tensor, trainable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._entries.values() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every tensor's values, in store order."""
        return {p.name: p.tensor.data.copy() for p in self._entries.values()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._entries if n not in state]
        unexpected = [n for n in state if n not in self._entries]
        problems = [f"missing {n}" for n in missing] if strict else []
        problems += [f"unexpected {n}" for n in unexpected] if strict else []
        for name, values in state.items():
            if name not in self._entries:
                continue
            target = self._entries[name].tensor
            if tuple(np.shape(values)) != target.shape:
                problems.append(f"{name}: shape {np.shape(values)} != {target.shape}")
                continue
            target.data[...] = values
        if problems:
            raise ConfigError(problems)

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.tensor.grad = None
