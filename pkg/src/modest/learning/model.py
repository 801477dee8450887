from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BYTES_PER_PARAM = 4


@dataclass(frozen=True, eq=False)
class Model:
    """Flat parameter vector plus the byte size used for traffic accounting."""

    params: np.ndarray
    bytes_per_param: int = DEFAULT_BYTES_PER_PARAM

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.ndim != 1:
            raise ValueError("model parameters must be a flat vector")
        if not np.all(np.isfinite(params)):
            raise ValueError("model parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def dim(self) -> int:
        return self.params.shape[0]

    @property
    def byte_size(self) -> int:
        return self.dim * self.bytes_per_param

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Model) and np.array_equal(self.params, other.params)

    def __hash__(self):
        return hash(self.params.tobytes())


def aggregate_models(models) -> Model:
    """Unweighted elementwise mean, summed in the order given."""
    models = list(models)
    if not models:
        raise ValueError("cannot aggregate an empty list of models")
    dim = models[0].dim
    total = np.zeros(dim)
    for m in models:
        if m.dim != dim:
            raise ValueError(f"model dimension mismatch: {m.dim} != {dim}")
        total += m.params
    return Model(total / len(models), models[0].bytes_per_param)
