"""Distance matrices, minimum-cost assignment, and moving averages.

The assignment solver is a Jonker-Volgenant-style shortest augmenting path
implementation (O(M^3)) that also returns dual potentials. The potentials
let us canonicalize the solution: among all minimum-cost permutations, the
lexicographically smallest mapping is returned, so ties (e.g. between
identical zero-padded rows) resolve deterministically.
"""

from __future__ import annotations

import numpy as np

from .accdoa import scene_frames

_INF = float("inf")


def distance_matrix(gt_frame, est_frame, squared: bool = False) -> np.ndarray:
    """Pairwise Euclidean distances between reference and estimated vectors.

    Returns d with d[i, j] = |gt_frame[i] - est_frame[j]|. With squared=True
    the entries are squared distances (ablation switch for assignment).
    """
    gt_frame = np.asarray(gt_frame, dtype=float)
    est_frame = np.asarray(est_frame, dtype=float)
    if gt_frame.shape != est_frame.shape or gt_frame.ndim != 2 or gt_frame.shape[1] != 3:
        raise ValueError(
            f"frames must both be (M, 3), got {gt_frame.shape} and {est_frame.shape}"
        )
    diff = gt_frame[:, None, :] - est_frame[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return d2 if squared else np.sqrt(d2)


def distance_matrix_sequence(gt_scene, est_scene, squared: bool = False) -> np.ndarray:
    """Per-frame distance matrices D(t) as a (T, M, M) array."""
    gt = scene_frames(gt_scene)
    est = scene_frames(est_scene)
    if gt.shape != est.shape:
        raise ValueError(f"scene shapes differ: {gt.shape} vs {est.shape}")
    diff = gt[:, :, None, :] - est[:, None, :, :]
    d2 = np.einsum("tijk,tijk->tij", diff, diff)
    return d2 if squared else np.sqrt(d2)


def assignment_cost(d, mapping) -> float:
    """Total cost of assigning row m to column mapping[m]."""
    d = np.asarray(d, dtype=float)
    mapping = np.asarray(mapping)
    return float(d[np.arange(d.shape[0]), mapping].sum())


def _solve_jv(cost: list, n: int):
    """Shortest-augmenting-path assignment on an n x n cost list-of-rows.

    Returns (col_of_row, u, v) where u, v are dual potentials satisfying
    cost[i][j] >= u[i] + v[j] with equality on the matched edges.
    Indices are 0-based externally, 1-based internally (column 0 is the
    virtual start column of the augmenting search).
    """
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j] = row matched to column j, 0 if free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [_INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = _INF
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u, v


def _lex_canonical(cost: list, n: int, col_of_row: list, u: list, v: list,
                   tol: float) -> list:
    """Lexicographically smallest mapping among minimum-cost permutations.

    By complementary slackness every optimal permutation lives on the edges
    that are tight against the dual potentials, so we greedily fix rows in
    order to their smallest tight column that still admits a perfect matching
    on the remaining tight graph (checked with an augmenting-path rematch).
    """
    row_of = [-1] * n
    for i, j in enumerate(col_of_row):
        row_of[j] = i
    adj = []
    for i in range(n):
        row = cost[i]
        ui = u[i + 1]
        tight = [j for j in range(n) if row[j] - ui - v[j + 1] <= tol]
        if col_of_row[i] not in tight:  # matched edge is tight up to rounding
            tight.append(col_of_row[i])
            tight.sort()
        adj.append(tight)
    locked_col = [False] * n

    def rematch(r: int, banned: int, visited: list) -> bool:
        # Kuhn-style augmenting search for a new column for row r.
        for c in adj[r]:
            if c == banned or locked_col[c] or visited[c]:
                continue
            visited[c] = True
            if row_of[c] == -1 or rematch(row_of[c], banned, visited):
                col_of_row[r] = c
                row_of[c] = r
                return True
        return False

    for i in range(n):
        current = col_of_row[i]
        for j in adj[i]:
            if j == current:
                break
            if locked_col[j] or j > current:
                continue
            displaced = row_of[j]
            row_of[current] = -1  # row i releases its column
            visited = [False] * n
            visited[j] = True
            if rematch(displaced, j, visited):
                col_of_row[i] = j
                row_of[j] = i
                break
            row_of[current] = i  # no feasible completion, undo
        locked_col[col_of_row[i]] = True
    return col_of_row


def hungarian(d) -> np.ndarray:
    """Minimum-cost assignment of a square distance matrix.

    Returns the mapping array sigma with sigma[m] = column assigned to row m,
    minimizing sum(d[m, sigma[m]]). When several permutations achieve the
    minimum cost, the lexicographically smallest mapping is returned.
    """
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got {d.shape}")
    n = d.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.intp)
    amax = float(np.abs(d).max())
    if not np.isfinite(amax):
        raise ValueError("distance matrix entries must be finite")
    cost = d.tolist()
    col_of_row, u, v = _solve_jv(cost, n)
    col_of_row = _lex_canonical(cost, n, col_of_row, u, v, 1e-9 * (1.0 + amax))
    return np.asarray(col_of_row, dtype=np.intp)


def moving_average(seq, window: int, mode: str = "causal") -> np.ndarray:
    """Moving average over the frame axis of a (T, M, M) matrix sequence.

    causal: output[t] averages seq[max(0, t-window+1) .. t]; partial windows
    at the start average over the frames that exist.
    centered: a symmetric window of the same length, clipped at both ends.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if mode not in ("causal", "centered"):
        raise ValueError(f"mode must be 'causal' or 'centered', got {mode!r}")
    seq = np.asarray(seq, dtype=float)
    if seq.ndim != 3 or seq.shape[1] != seq.shape[2]:
        raise ValueError(f"sequence must be (T, M, M), got {seq.shape}")
    if window == 1:
        return seq.copy()
    t_len = seq.shape[0]
    out = np.empty_like(seq)
    if mode == "causal":
        for t in range(t_len):
            lo = max(0, t - window + 1)
            out[t] = seq[lo:t + 1].mean(axis=0)
    else:
        back = (window - 1) // 2
        fwd = window // 2
        for t in range(t_len):
            lo = max(0, t - back)
            hi = min(t_len - 1, t + fwd)
            out[t] = seq[lo:hi + 1].mean(axis=0)
    return out
