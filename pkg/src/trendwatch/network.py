"""Region networks from growth-rate trajectory similarity.

Pairwise distances are soft dynamic time warping values over each region's
standardized historical growth-rate (beta) sequence; a k-nearest-neighbor
graph over those distances drives cross-region aggregation of growth
estimates, and a classical-MDS embedding plus K-means yields region
clusters. Baseline networks (edge lists or coordinates) plug into the same
graph machinery for comparison.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, spearmanr

from .errors import DataError
from .localreg import FitSeries, RegressionFit
from .panel import RegionMeta

HISTORY_FLOOR = 60
MAX_BETA_GAP = 7
EDGE_EPS = 1e-9
EARTH_RADIUS_KM = 6371.0


def softmin(values: np.ndarray, gamma: float) -> float:
    """-gamma * log(sum(exp(-x/gamma))), shifted by the min for stability."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    values = np.asarray(values, dtype=float)
    lo = values.min()
    return float(lo - gamma * np.log(np.exp(-(values - lo) / gamma).sum()))


def _soft_dtw_py(a: np.ndarray, b: np.ndarray, gamma: float) -> float:
    n, m = len(a), len(b)
    big = np.inf
    r = np.full((n + 1, m + 1), big)
    r[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = (a[i - 1] - b[j - 1]) ** 2
            lo = min(r[i - 1, j], r[i, j - 1], r[i - 1, j - 1])
            s = (
                math.exp(-(r[i - 1, j] - lo) / gamma)
                + math.exp(-(r[i, j - 1] - lo) / gamma)
                + math.exp(-(r[i - 1, j - 1] - lo) / gamma)
            )
            r[i, j] = cost + lo - gamma * math.log(s)
    return float(r[n, m])


try:
    from numba import njit

    _soft_dtw_kernel = njit(cache=True)(_soft_dtw_py)
except ImportError:  # pragma: no cover - numba is an optional speedup
    _soft_dtw_kernel = _soft_dtw_py


def soft_dtw(a, b, gamma: float) -> float:
    """Soft-DTW value with squared-difference cost.

    Dynamic program r[i,j] = cost(a_i, b_j) + softmin of the three
    predecessors; softmin at temperature gamma, computed with a min shift so
    small gammas stay finite.
    """
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise DataError("soft_dtw requires non-empty sequences")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DataError("soft_dtw requires finite sequences")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return float(_soft_dtw_kernel(a, b, gamma))


@dataclass(frozen=True)
class DistanceMatrix:
    region_order: tuple[str, ...]
    D: np.ndarray
    gamma: float | None = None

    def __post_init__(self):
        D = self.D
        if D.shape != (len(self.region_order), len(self.region_order)):
            raise ValueError("distance matrix shape does not match region order")
        if not np.all(np.isfinite(D)):
            raise ValueError("distance matrix has non-finite entries")
        if not np.allclose(D, D.T, atol=1e-12, rtol=0.0):
            raise ValueError("distance matrix must be symmetric")

    def index_of(self, region: str) -> int:
        return self.region_order.index(region)


def history_features(
    fit_series: FitSeries,
    history_policy: str = "truncate_to_longest_block",
    floor: int = HISTORY_FLOOR,
) -> np.ndarray | None:
    """Standardized beta sequence for one region, or None below the floor.

    Interior date gaps up to MAX_BETA_GAP days are linearly interpolated;
    longer gaps either restrict the sequence to its longest contiguous block
    (truncate_to_longest_block) or fail.
    """
    if history_policy not in ("truncate_to_longest_block", "fail"):
        raise ValueError(f"unknown history policy: {history_policy}")
    dates, betas = fit_series.beta_series()
    if len(dates) == 0:
        return None
    steps = np.diff(dates)
    if np.any(steps > MAX_BETA_GAP):
        if history_policy == "fail":
            raise DataError(
                f"{fit_series.region_id}: beta history has a gap longer than {MAX_BETA_GAP} days"
            )
        # longest block between oversized gaps
        cuts = np.flatnonzero(steps > MAX_BETA_GAP)
        bounds = np.concatenate([[0], cuts + 1, [len(dates)]])
        lengths = np.diff(bounds)
        best = int(np.argmax(lengths))
        sl = slice(bounds[best], bounds[best + 1])
        dates, betas = dates[sl], betas[sl]
    full = np.arange(dates[0], dates[-1] + 1)
    values = np.interp(full, dates, betas)
    if len(values) < floor:
        return None
    sd = values.std()
    return (values - values.mean()) / sd if sd > 0 else values - values.mean()


def distance_matrix(
    fit_series_by_region: dict[str, FitSeries],
    gamma: float = 1.0,
    history_policy: str = "truncate_to_longest_block",
    floor: int = HISTORY_FLOOR,
    jobs: int = 1,
) -> tuple[DistanceMatrix, dict[str, str]]:
    """Pairwise soft-DTW divergence over standardized beta histories.

    Entries are d(a, b) - (d(a, a) + d(b, b)) / 2, which removes the
    entropic offset of the raw soft-DTW value so the diagonal is exactly
    zero and similar histories map to small dissimilarities. Regions whose
    usable history falls below the floor are excluded and reported in the
    second return value. The matrix is symmetrized as (D + D^T)/2.
    """
    features: dict[str, np.ndarray] = {}
    excluded: dict[str, str] = {}
    for region in sorted(fit_series_by_region):
        feat = history_features(fit_series_by_region[region], history_policy, floor)
        if feat is None:
            excluded[region] = f"fewer than {floor} usable beta values"
        else:
            features[region] = feat
    order = tuple(sorted(features))
    n = len(order)
    D = np.zeros((n, n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if jobs > 1 and len(pairs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        from multiprocessing import get_context

        feats = [features[r] for r in order]
        with ProcessPoolExecutor(
            max(1, jobs), mp_context=get_context("fork"), initializer=_set_worker_features, initargs=(feats, gamma)
        ) as pool:
            values = list(pool.map(_pair_distance, pairs, chunksize=64))
    else:
        values = [soft_dtw(features[order[i]], features[order[j]], gamma) for i, j in pairs]
    self_terms = np.array([soft_dtw(features[r], features[r], gamma) for r in order])
    for (i, j), v in zip(pairs, values):
        d = v - 0.5 * (self_terms[i] + self_terms[j])
        D[i, j] = d
        D[j, i] = d
    D = 0.5 * (D + D.T)
    return DistanceMatrix(order, D, gamma), excluded


_WORKER_FEATURES: list[np.ndarray] | None = None
_WORKER_GAMMA = 1.0


def _set_worker_features(features, gamma):
    global _WORKER_FEATURES, _WORKER_GAMMA
    _WORKER_FEATURES = features
    _WORKER_GAMMA = gamma


def _pair_distance(pair):
    i, j = pair
    return soft_dtw(_WORKER_FEATURES[i], _WORKER_FEATURES[j], _WORKER_GAMMA)


@dataclass(frozen=True)
class NeighborGraph:
    neighbors: dict[str, tuple[tuple[str, float], ...]]  # region -> ((neighbor, distance), ...)
    k: int
    scope: str = "all"
    flagged: dict[str, str] = field(default_factory=dict)

    @property
    def regions(self) -> list[str]:
        return sorted(self.neighbors)


def knn_graph(
    dm: DistanceMatrix,
    k: int,
    scope: str = "all",
    metadata: dict[str, RegionMeta] | None = None,
) -> NeighborGraph:
    """k smallest-distance neighbors per region, ties broken by region id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if scope not in ("all", "in_state"):
        raise ValueError(f"unknown scope: {scope}")
    if scope == "in_state" and not metadata:
        raise DataError("in_state scope requires region metadata with state codes")
    neighbors: dict[str, tuple[tuple[str, float], ...]] = {}
    flagged: dict[str, str] = {}
    order = dm.region_order
    for i, region in enumerate(order):
        pool = []
        for j, other in enumerate(order):
            if j == i:
                continue
            if scope == "in_state" and metadata[other].state_code != metadata[region].state_code:
                continue
            pool.append((float(dm.D[i, j]), other))
        pool.sort()
        if len(pool) < k:
            flagged[region] = f"only {len(pool)} candidates for k={k}"
        neighbors[region] = tuple((r, d) for d, r in pool[:k])
    return NeighborGraph(neighbors, k, scope, flagged)


def aggregate_growth(
    fit_series_by_region: dict[str, FitSeries],
    graph: NeighborGraph,
    weights: dict[str, float] | None = None,
    include_self: bool = False,
) -> dict[str, FitSeries]:
    """Neighbor-averaged growth estimates per region.

    beta_agg(t) = sum w_s beta_s(t) / sum w_s over neighbors with a fit at t
    (plus the region itself when include_self is set); the variance uses the
    independence formula sum w^2 se^2 / (sum w)^2. Dates where no
    contributor has a fit are skipped.
    """
    missing = [r for r in graph.regions if r not in fit_series_by_region]
    if missing:
        raise DataError(f"graph regions without fits: {', '.join(missing)}")
    out: dict[str, FitSeries] = {}
    for region in graph.regions:
        base = fit_series_by_region[region]
        sources = [r for r, _ in graph.neighbors[region]]
        if include_self:
            sources = [region] + sources
        all_dates = sorted({d for r in sources for d in fit_series_by_region[r].fits})
        fits: dict[int, RegressionFit] = {}
        skipped: dict[int, str] = {}
        for date in all_dates:
            num = den = var_num = 0.0
            n_avail = 0
            for r in sources:
                fit = fit_series_by_region[r].fits.get(date)
                if fit is None or not fit.converged:
                    continue
                w = 1.0 if weights is None else weights[r]
                if w <= 0:
                    raise ValueError(f"non-positive weight for {r}")
                num += w * fit.beta_hat
                var_num += w * w * fit.se_beta**2
                den += w
                n_avail += 1
            if n_avail == 0:
                skipped[date] = "no neighbor fit available"
                continue
            beta = num / den
            se = math.sqrt(var_num) / den
            z = beta / se if se > 0 else (0.0 if beta == 0 else math.inf * np.sign(beta))
            fits[date] = RegressionFit(
                model="aggregate",
                alpha_hat=float("nan"),
                beta_hat=beta,
                se_beta=se,
                z_score=float(z),
                p_one_sided=float(norm.sf(z)),
                n=base.window_n,
                converged=True,
                iterations=0,
            )
        out[region] = FitSeries(region, base.stream_id, base.window_n, fits, skipped)
    return out


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


def baseline_network(
    edge_list: list[tuple[str, str, float]] | None = None,
    metadata: dict[str, RegionMeta] | None = None,
) -> DistanceMatrix:
    """Distances from an edge list (d = 1/(w + eps)) or great-circle km."""
    if (edge_list is None) == (metadata is None):
        raise ValueError("provide exactly one of edge_list or metadata")
    if edge_list is not None:
        regions = sorted({r for a, b, _ in edge_list for r in (a, b)})
        index = {r: i for i, r in enumerate(regions)}
        n = len(regions)
        D = np.full((n, n), 1.0 / EDGE_EPS)
        np.fill_diagonal(D, 0.0)
        for a, b, w in edge_list:
            if w < 0:
                raise DataError(f"negative edge weight between {a} and {b}")
            d = 1.0 / (w + EDGE_EPS)
            D[index[a], index[b]] = min(D[index[a], index[b]], d)
            D[index[b], index[a]] = D[index[a], index[b]]
        return DistanceMatrix(tuple(regions), D)
    regions = sorted(metadata)
    for r in regions:
        if metadata[r].latitude is None or metadata[r].longitude is None:
            raise DataError(f"region {r} lacks coordinates")
    n = len(regions)
    D = np.zeros((n, n))
    for i in range(n):
        mi = metadata[regions[i]]
        for j in range(i + 1, n):
            mj = metadata[regions[j]]
            D[i, j] = D[j, i] = haversine_km(mi.latitude, mi.longitude, mj.latitude, mj.longitude)
    return DistanceMatrix(tuple(regions), D)


def mds_embedding(dm: DistanceMatrix, embed_dim: int) -> np.ndarray:
    """Classical multidimensional scaling of a distance matrix.

    Double-centers the squared distances and keeps the top positive
    eigenpairs; embed_dim is reduced with a warning when fewer positive
    eigenvalues exist.
    """
    n = len(dm.region_order)
    J = np.eye(n) - np.ones((n, n)) / n
    B = -0.5 * J @ (dm.D**2) @ J
    evals, evecs = np.linalg.eigh(B)
    pos = evals > max(evals.max(), 0.0) * 1e-12
    n_pos = int(pos.sum())
    if n_pos < embed_dim:
        warnings.warn(f"embedding rank {n_pos} < embed_dim {embed_dim}; reducing", stacklevel=2)
        embed_dim = max(n_pos, 1)
    idx = np.argsort(evals)[::-1][:embed_dim]
    return evecs[:, idx] * np.sqrt(np.maximum(evals[idx], 0.0))


def cluster_regions(
    dm: DistanceMatrix, k_clusters: int, embed_dim: int = 10, seed: int = 0
) -> dict[str, int]:
    """K-means labels (50 restarts, fixed seed) on the MDS embedding."""
    if len(dm.region_order) <= k_clusters:
        raise DataError("need more regions than clusters")
    from sklearn.cluster import KMeans

    X = mds_embedding(dm, embed_dim)
    km = KMeans(n_clusters=k_clusters, n_init=50, random_state=seed)
    labels = km.fit_predict(X)
    return {r: int(label) for r, label in zip(dm.region_order, labels)}


def in_state_fraction(
    graph: NeighborGraph, metadata: dict[str, RegionMeta]
) -> tuple[dict[str, float], float, tuple[float, float]]:
    """Per-state mean in-state neighbor fraction, overall mean, and 95% CI.

    The CI is a normal approximation across state means.
    """
    per_region: dict[str, list[float]] = {}
    for region, nbrs in graph.neighbors.items():
        state = metadata[region].state_code
        if not nbrs:
            continue
        frac = sum(1.0 for r, _ in nbrs if metadata[r].state_code == state) / len(nbrs)
        per_region.setdefault(state, []).append(frac)
    per_state = {s: float(np.mean(v)) for s, v in per_region.items()}
    means = np.array(list(per_state.values()))
    overall = float(means.mean())
    if len(means) > 1:
        half = 1.959963984540054 * float(means.std(ddof=1)) / math.sqrt(len(means))
    else:
        half = 0.0
    return per_state, overall, (overall - half, overall + half)


def network_correlation(da: DistanceMatrix, db: DistanceMatrix) -> float:
    """Spearman rho over upper-triangle distances of the common regions."""
    common = sorted(set(da.region_order) & set(db.region_order))
    n = len(common)
    if n * (n - 1) // 2 < 10:
        raise DataError("need at least 10 common region pairs")
    ia = [da.index_of(r) for r in common]
    ib = [db.index_of(r) for r in common]
    Da = da.D[np.ix_(ia, ia)]
    Db = db.D[np.ix_(ib, ib)]
    iu = np.triu_indices(n, k=1)
    rho, _ = spearmanr(Da[iu], Db[iu])
    return float(rho)


def write_graph_csv(path: str, graph: NeighborGraph) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "neighbor_id", "rank", "distance"])
        for region in graph.regions:
            for rank, (nbr, dist) in enumerate(graph.neighbors[region], start=1):
                writer.writerow([region, nbr, rank, repr(float(dist))])


def write_cluster_csv(path: str, labels: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "cluster"])
        for region in sorted(labels):
            writer.writerow([region, labels[region]])


def write_distance_csv(path: str, dm: DistanceMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id"] + list(dm.region_order))
        for i, region in enumerate(dm.region_order):
            writer.writerow([region] + [repr(float(v)) for v in dm.D[i]])


def load_distance_csv(path: str, gamma: float | None = None) -> DistanceMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "region_id":
        raise DataError(f"{path}: expected a region-order header")
    order = tuple(rows[0][1:])
    D = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return DistanceMatrix(order, D, gamma)
