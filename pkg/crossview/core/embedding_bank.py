import json
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from crossview.core.errors import ConfigurationError, DataError, NumericError, UsageError

logger = logging.getLogger(__name__)

_UNIT_TOL = 1e-4


class EmbeddingBank:
    """
    Holds N unit-norm embeddings of dimension D together with their ids.
    A bank is a read-only snapshot once built; ranking never mutates it.
    """

    def __init__(self, vectors=None, ids: Optional[Sequence[str]] = None):
        self._vectors = np.empty((0, 0), dtype=np.float32)
        self._ids: list[str] = []
        if vectors is not None:
            self.set_data(vectors, ids)

    def __len__(self):
        return len(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def ids(self) -> list[str]:
        return self._ids

    @property
    def dim(self) -> int:
        return int(self._vectors.shape[1]) if self._vectors.ndim == 2 else 0

    def set_data(self, vectors, ids: Optional[Sequence[str]] = None):
        """
        Sets the bank contents.

        Args:
            vectors (np.ndarray): NxD array of unit-norm embeddings.
            ids (list): Optional list of N identifiers; defaults to "0".."N-1".
        """
        vectors = np.asarray(vectors)
        if vectors.dtype != np.float64:
            vectors = vectors.astype(np.float32)
        if vectors.ndim != 2:
            raise ConfigurationError("Embeddings must be an NxD array.")
        if not np.all(np.isfinite(vectors)):
            raise NumericError("Embedding bank contains non-finite values.")
        if ids is None:
            ids = [str(i) for i in range(len(vectors))]
        elif len(ids) != len(vectors):
            raise ConfigurationError("Ids must have the same length as vectors.")

        norms = np.linalg.norm(vectors, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > _UNIT_TOL:
            logger.warning("Embedding bank vectors are not unit-norm (max deviation %.2e)",
                           float(np.max(np.abs(norms - 1.0))))

        self._vectors = np.ascontiguousarray(vectors)
        self._ids = [str(i) for i in ids]

    def distances(self, query) -> np.ndarray:
        """Euclidean distances from ``query`` (D,) to every stored vector."""
        if len(self) == 0:
            raise UsageError("Cannot rank against an empty reference set.")
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ConfigurationError(f"Query of shape {query.shape} does not match dim {self.dim}")
        diff = self._vectors.astype(np.float64) - query
        return np.sqrt(np.sum(diff**2, axis=1))

    def rank(self, query) -> np.ndarray:
        """
        Full ranking by ascending Euclidean distance.
        Ties keep the lower index first (stable sort).
        """
        return np.argsort(self.distances(query), kind="stable")

    def rank_all(self, queries) -> np.ndarray:
        """(M, N) rankings for M queries."""
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2:
            raise ConfigurationError("Queries must be an MxD array.")
        return np.stack([self.rank(q) for q in queries]) if len(queries) else np.empty((0, len(self)), dtype=np.int64)

    def get_closest(self, query, threshold: Optional[float] = None) -> Optional[int]:
        """
        Index of the nearest stored embedding, or None if it lies further
        than ``threshold``.
        """
        dist = self.distances(query)
        best = int(np.argmin(dist))
        if threshold is not None and dist[best] > threshold:
            return None
        return best

    def save(self, prefix: Union[str, Path]):
        """
        Writes ``<prefix>.bin`` (row-major little-endian float32) and the
        ``<prefix>.json`` sidecar {count, dim, ids, norm}.
        """
        blob_path, meta_path = bank_files(prefix)
        blob_path.parent.mkdir(parents=True, exist_ok=True)
        sidecar = {"count": len(self), "dim": self.dim, "ids": self._ids, "norm": "l2"}
        try:
            self._vectors.astype("<f4").tofile(blob_path)
            meta_path.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataError(f"Cannot write embedding bank {prefix}: {e}") from e

    @classmethod
    def load(cls, prefix: Union[str, Path]) -> "EmbeddingBank":
        blob_path, meta_path = bank_files(prefix)
        for path in (meta_path, blob_path):
            if not path.exists():
                raise DataError(f"Embedding bank file not found: {path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        try:
            count, dim, ids = int(meta["count"]), int(meta["dim"]), list(meta["ids"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed embedding bank sidecar {meta_path}: {e}") from e
        blob = np.fromfile(blob_path, dtype="<f4")
        if blob.size != count * dim:
            raise DataError(f"{blob_path}: expected {count * dim} floats, found {blob.size}")
        return cls(blob.reshape(count, dim).astype(np.float32), ids)


def bank_files(prefix: Union[str, Path]) -> tuple[Path, Path]:
    """``<prefix>.bin`` and ``<prefix>.json``; dots inside the prefix are kept."""
    prefix = str(prefix)
    return Path(prefix + ".bin"), Path(prefix + ".json")
