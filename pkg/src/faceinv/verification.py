"""Biometric attack evaluation: thresholds, TAR/FAR, and protocols.

The attacked system is modeled as a cosine-similarity verifier over the
target embedder's templates. Its acceptance threshold is calibrated on an
impostor score distribution: the smallest score tau such that the fraction
of impostor scores >= tau does not exceed the requested FAR. Candidates
are the observed scores themselves (plus a just-above-max sentinel when
even the maximum is infeasible), so calibration is exact counting, not
interpolation.

Two genuine protocols are evaluated:

* type1: the reconstruction is matched against the very image whose leaked
  template was inverted (enrolled-image attack).
* type2: the reconstruction from image j+1 of an identity is matched
  against image j (sibling-image attack); identities with a single image
  contribute nothing and are counted as skipped.

Impostor scores come from cross-identity pairs of enrolled templates.
Unordered pairs are used: the ordered product only duplicates each cosine
symmetrically, which cannot change any count/N comparison. Pools beyond
``impostor_cap`` are subsampled with a seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .backends import BackendRegistry
from .manifest import DatasetManifest
from .types import FaceTemplate

__all__ = [
    "ScoreSet",
    "FarPoint",
    "VerificationReport",
    "TransferMatrix",
    "calibrate_threshold",
    "tar_at_far",
    "run_verification",
    "transfer_matrix",
]

PROTOCOLS = ("type1", "type2")


@dataclass
class ScoreSet:
    """Genuine and impostor similarity scores for one experiment."""

    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ValueError("score sets must contain genuine and impostor scores")
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ValueError("scores must be finite")


def calibrate_threshold(impostor_scores: np.ndarray, far: float) -> float:
    """Smallest threshold whose impostor acceptance rate is <= far.

    Acceptance is score >= threshold. The threshold is always one of the
    observed scores unless even the maximum score is accepted too often, in
    which case the next float above the maximum is returned (acceptance
    rate exactly 0).
    """
    scores = np.asarray(impostor_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("cannot calibrate a threshold without impostor scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("impostor scores must be finite")
    if not 0.0 < far <= 1.0:
        raise ValueError(f"far must be in (0, 1], got {far}")
    n = scores.size
    sorted_scores = np.sort(scores)
    candidates = np.unique(sorted_scores)
    # accepted count for candidate t: n - (index of first score >= t)
    accepted = n - np.searchsorted(sorted_scores, candidates, side="left")
    feasible = accepted <= far * n
    idx = np.nonzero(feasible)[0]
    if idx.size == 0:
        return float(np.nextafter(sorted_scores[-1], np.inf))
    return float(candidates[idx[0]])


def tar_at_far(scores: ScoreSet, far: float) -> tuple[float, float]:
    """True accept rate at the threshold calibrated for ``far``.

    Returns (tar, threshold).
    """
    tau = calibrate_threshold(scores.impostor, far)
    tar = float(np.count_nonzero(scores.genuine >= tau)) / scores.genuine.size
    return tar, tau


@dataclass
class FarPoint:
    far: float
    threshold: float
    tar: float


@dataclass
class VerificationReport:
    """Outcome of one attack-evaluation run at several FAR levels."""

    dataset: str
    protocol: str
    f_database: str
    f_loss: str
    f_target: str
    points: list[FarPoint]
    n_genuine: int
    n_impostor: int
    skipped_identities: int
    scores: Optional[ScoreSet] = None

    def point_at(self, far: float) -> FarPoint:
        for p in self.points:
            if math.isclose(p.far, far, rel_tol=1e-9, abs_tol=0.0):
                return p
        raise KeyError(f"no FAR level {far} in report "
                       f"(has {[p.far for p in self.points]})")


def _impostor_scores(embeddings: list[np.ndarray], identities: list[str],
                     cap: int, rng_seed: int) -> np.ndarray:
    """Cosine scores over cross-identity unordered pairs, capped by sampling."""
    n = len(embeddings)
    ii, jj = np.triu_indices(n, k=1)
    ids = np.array(identities)
    keep = ids[ii] != ids[jj]
    ii, jj = ii[keep], jj[keep]
    if ii.size == 0:
        raise ValueError("no cross-identity impostor pairs in the evaluation split")
    if ii.size > cap:
        pick = np.random.default_rng(rng_seed).choice(ii.size, size=cap, replace=False)
        pick.sort()
        ii, jj = ii[pick], jj[pick]
    mat = np.stack(embeddings)
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    return np.einsum("ij,ij->i", mat[ii], mat[jj])


def run_verification(manifest: DatasetManifest,
                     attack_fn: Callable[[FaceTemplate, int], np.ndarray],
                     registry: BackendRegistry,
                     f_database: str, f_target: str,
                     far_levels: Sequence[float],
                     protocol: str = "type1",
                     f_loss: str = "",
                     split: str = "test",
                     impostor_cap: int = 1_000_000,
                     rng_seed: int = 0,
                     image_loader: Optional[Callable[[str], np.ndarray]] = None,
                     keep_scores: bool = False) -> VerificationReport:
    """Run one attack-evaluation protocol end to end.

    ``attack_fn(template, noise_seed)`` must return a reconstructed image
    from a leaked template alone. Genuine scores follow the protocol;
    impostor scores and thresholds depend only on the enrolled images and
    the target embedder, never on reconstructions. Images are loaded with
    the manifest's root-resolving loader unless one is supplied.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if not far_levels:
        raise ValueError("far_levels must be non-empty")
    records = manifest.subset(split)
    if not records:
        raise ValueError(f"manifest has no images in split {split!r}")
    if image_loader is None:
        image_loader = manifest.loader()

    images = [image_loader(r.image_path) for r in records]
    identities = [r.identity_id for r in records]
    target_embs = [registry.fr_embed(f_target, img).values for img in images]

    seeds = np.random.SeedSequence(rng_seed).spawn(2)
    noise_rng = np.random.default_rng(seeds[0])
    impostor = _impostor_scores(target_embs, identities, impostor_cap,
                                int(seeds[1].generate_state(1)[0]))

    def unit(v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    genuine: list[float] = []
    skipped = 0
    if protocol == "type1":
        for i, img in enumerate(images):
            leaked = registry.fr_embed(f_database, img)
            recon = attack_fn(leaked, int(noise_rng.integers(0, 2**63)))
            score = float(unit(registry.fr_embed(f_target, recon).values)
                          @ unit(target_embs[i]))
            genuine.append(score)
    else:
        by_identity: dict[str, list[int]] = {}
        for i, ident in enumerate(identities):
            by_identity.setdefault(ident, []).append(i)
        for ident, idxs in by_identity.items():
            if len(idxs) < 2:
                skipped += 1
                continue
            # enrollee j is matched against the reconstruction from j+1
            for j in range(len(idxs) - 1):
                enrollee = idxs[j]
                sibling = idxs[j + 1]
                leaked = registry.fr_embed(f_database, images[sibling])
                recon = attack_fn(leaked, int(noise_rng.integers(0, 2**63)))
                score = float(unit(registry.fr_embed(f_target, recon).values)
                              @ unit(target_embs[enrollee]))
                genuine.append(score)
    if not genuine:
        raise ValueError(
            f"protocol {protocol!r} produced no genuine pairs "
            f"({skipped} identities skipped)")

    scores = ScoreSet(np.array(genuine), impostor)
    points = []
    for far in far_levels:
        tar, tau = tar_at_far(scores, far)
        points.append(FarPoint(far=float(far), threshold=tau, tar=tar))
    return VerificationReport(
        dataset=manifest.name, protocol=protocol,
        f_database=f_database, f_loss=f_loss, f_target=f_target,
        points=points, n_genuine=scores.genuine.size,
        n_impostor=scores.impostor.size, skipped_identities=skipped,
        scores=scores if keep_scores else None,
    )


@dataclass
class TransferMatrix:
    """TAR grid: rows are (dataset, leaked system), columns are targets."""

    row_labels: list[tuple[str, str]]
    col_labels: list[str]
    far: float
    protocol: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_labels), len(self.col_labels)):
            raise ValueError("transfer matrix shape does not match its labels")


def transfer_matrix(reports: Sequence[VerificationReport], far: float) -> TransferMatrix:
    """Assemble a transfer grid from verification reports at one FAR level.

    Rows are the distinct (dataset, f_database) combinations and columns
    the distinct targets, both in first-appearance order; every cell must
    be covered by exactly one report.
    """
    if not reports:
        raise ValueError("no reports to assemble")
    protocols = {r.protocol for r in reports}
    if len(protocols) != 1:
        raise ValueError(f"reports mix protocols: {sorted(protocols)}")
    rows: list[tuple[str, str]] = []
    cols: list[str] = []
    for r in reports:
        key = (r.dataset, r.f_database)
        if key not in rows:
            rows.append(key)
        if r.f_target not in cols:
            cols.append(r.f_target)
    values = np.full((len(rows), len(cols)), np.nan)
    for r in reports:
        i = rows.index((r.dataset, r.f_database))
        j = cols.index(r.f_target)
        if not np.isnan(values[i, j]):
            raise ValueError(
                f"duplicate cell ({r.dataset}, {r.f_database}) x {r.f_target}")
        values[i, j] = r.point_at(far).tar
    if np.any(np.isnan(values)):
        missing = [(rows[i], cols[j]) for i, j in zip(*np.nonzero(np.isnan(values)))]
        raise ValueError(f"transfer grid has uncovered cells: {missing}")
    return TransferMatrix(rows, cols, float(far), protocols.pop(), values)
