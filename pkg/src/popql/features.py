"""Linear bases over states or state-action pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NORM_TOL = 1e-10


@dataclass(frozen=True)
class FeatureMap:
    """Rows of ``Phi`` are feature vectors at flat index ``s * m + a``.

    ``normalized`` is False only for bases that are deliberately left with
    non-unit rows (the printed three-state basis); theory that assumes
    unit-norm features does not strictly apply to those.
    """

    Phi: np.ndarray
    m: int = 1
    seed: int | None = None
    eps_basis: float | None = None
    normalized: bool = True

    def __post_init__(self):
        Phi = np.array(self.Phi, dtype=float)
        if Phi.ndim != 2 or Phi.shape[1] < 1:
            raise ValueError(f"Phi must be a (count, k) matrix with k >= 1, got {Phi.shape}")
        if Phi.shape[0] % self.m:
            raise ValueError("row count must be a multiple of the action count")
        if self.normalized:
            norms = np.linalg.norm(Phi, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOL):
                raise ValueError("normalized feature map has rows off the unit sphere")
        Phi.setflags(write=False)
        object.__setattr__(self, "Phi", Phi)

    @property
    def k(self) -> int:
        return self.Phi.shape[1]

    @property
    def count(self) -> int:
        return self.Phi.shape[0]

    def permuted(self, perm) -> "FeatureMap":
        return FeatureMap(self.Phi[np.asarray(perm)], self.m, self.seed, self.eps_basis, self.normalized)


def random_unit_features(seed, count: int, k: int, m: int = 1) -> FeatureMap:
    """Rows drawn from U([0,1]^k) and scaled to unit length."""
    if k < 1:
        raise ValueError("feature dimension k must be at least 1")
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(count, k))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return FeatureMap(X, m=m, seed=seed)


def three_state_basis(eps: float = 1e-4) -> FeatureMap:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    c = 0.5 * (1.05 + eps)
    Phi = np.array([[1.0, 0.0], [0.0, -1.0], [c, -c]])
    return FeatureMap(Phi, eps_basis=eps, normalized=False)


def features(fmap: FeatureMap, s: int, a: int = 0) -> np.ndarray:
    """Feature row for (s, a); a view, not a copy."""
    if not 0 <= a < fmap.m:
        raise IndexError(f"action {a} out of range for m={fmap.m}")
    idx = s * fmap.m + a
    if s < 0 or idx >= fmap.count:
        raise IndexError(f"state {s} out of range")
    return fmap.Phi[idx]


def feature_map_to_dict(fmap: FeatureMap) -> dict:
    return {
        "seed": fmap.seed,
        "k": fmap.k,
        "m": fmap.m,
        "eps_basis": fmap.eps_basis,
        "normalized": fmap.normalized,
        "rows": fmap.Phi.tolist(),
    }


def feature_map_from_dict(doc: dict) -> FeatureMap:
    Phi = np.asarray(doc["rows"], dtype=float)
    if Phi.shape[1] != doc["k"]:
        raise ValueError("row width disagrees with k")
    return FeatureMap(Phi, doc.get("m", 1), doc.get("seed"), doc.get("eps_basis"), doc.get("normalized", True))


def save_feature_map(fmap: FeatureMap, path) -> None:
    Path(path).write_text(json.dumps(feature_map_to_dict(fmap)))


def load_feature_map(path) -> FeatureMap:
    return feature_map_from_dict(json.loads(Path(path).read_text()))
