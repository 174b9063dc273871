"""Online empirical measures and the state x action bin partition."""

import csv
import math

import numpy as np


class EmpiricalMeasure:
    """Weighted atom list updated by ``mu <- (1 - rho) mu + rho delta_x``.

    ``n_members`` measures can share one object when they are always updated
    in lockstep with the same rate (the per-bin measures of the MFC trainer):
    they then share the weight of every atom and differ only in positions.
    Weights are stored relative to a running scale so one update costs O(1).
    """

    def __init__(self, initial, n_members=None, prune_threshold=1e-8):
        x = np.asarray(initial, dtype=float)
        if n_members is None:
            x = np.atleast_1d(x)[None, :]
        else:
            x = x.reshape(n_members, -1)
        self.n_members, self.dim = x.shape
        self.prune_threshold = float(prune_threshold)
        cap = 64
        self._pos = np.empty((cap, self.n_members, self.dim))
        self._raw = np.empty(cap)
        self._pos[0] = x
        self._raw[0] = 1.0
        self._size = 1
        self._scale = 1.0
        self._mean = x.copy()
        self._second = np.einsum("ki,kj->kij", x, x)
        self._since_prune = 0

    def __len__(self):
        return self._size

    def _grow(self):
        cap = 2 * self._pos.shape[0]
        pos = np.empty((cap, self.n_members, self.dim))
        raw = np.empty(cap)
        pos[:self._size] = self._pos[:self._size]
        raw[:self._size] = self._raw[:self._size]
        self._pos, self._raw = pos, raw

    def update(self, x_new, rho):
        x_new = np.asarray(x_new, dtype=float).reshape(self.n_members, self.dim)
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"measure rate must lie in [0, 1], got {rho}")
        if rho == 0.0:
            return self
        if rho == 1.0:
            self._pos[0] = x_new
            self._raw[0] = 1.0
            self._size, self._scale = 1, 1.0
            self._mean = x_new.copy()
            self._second = np.einsum("ki,kj->kij", x_new, x_new)
            return self
        self._scale *= 1.0 - rho
        if self._size == self._pos.shape[0]:
            self._grow()
        self._pos[self._size] = x_new
        self._raw[self._size] = rho / self._scale
        self._size += 1
        self._mean += rho * (x_new - self._mean)
        self._second += rho * (np.einsum("ki,kj->kij", x_new, x_new) - self._second)
        self._since_prune += 1
        if self._scale < 1e-150 or self._since_prune >= 1024:
            self.prune()
        return self

    def prune(self):
        """Drop atoms lighter than the threshold and renormalize."""
        w = self._raw[:self._size] * self._scale
        keep = w >= self.prune_threshold
        if not keep.any():
            keep[np.argmax(w)] = True
        n = int(keep.sum())
        self._pos[:n] = self._pos[:self._size][keep]
        w = w[keep]
        self._raw[:n] = w / w.sum()
        self._size, self._scale = n, 1.0
        self._since_prune = 0
        self._recompute_moments()
        return self

    def _recompute_moments(self):
        w = self._raw[:self._size]
        pos = self._pos[:self._size]
        self._mean = np.einsum("t,tki->ki", w, pos)
        self._second = np.einsum("t,tki,tkj->kij", w, pos, pos)

    def weights(self):
        return self._raw[:self._size] * self._scale

    def atoms(self, member=0):
        """``(positions, weights)`` with atoms at identical coordinates merged."""
        pos = self._pos[:self._size, member]
        w = self.weights()
        uniq, inv = np.unique(pos, axis=0, return_inverse=True)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inv.ravel(), w)
        return uniq, merged

    def mean(self, member=None):
        return self._mean.copy() if member is None else self._mean[member].copy()

    def cov(self, member=0):
        m = self._mean[member]
        c = self._second[member] - np.outer(m, m)
        return 0.5 * (c + c.T)

    def sample(self, n, rng, member=0):
        pos, w = self.atoms(member)
        idx = rng.choice(len(w), size=n, p=w / w.sum())
        return pos[idx]

    def to_csv(self, path_or_file, member=0):
        pos, w = self.atoms(member)
        header = [f"x{i}" for i in range(self.dim)] + ["weight"]
        rows = [[*map(repr, map(float, p)), repr(float(wi))] for p, wi in zip(pos, w)]
        _write_csv(path_or_file, header, rows)


def _write_csv(path_or_file, header, rows):
    if hasattr(path_or_file, "write"):
        writer = csv.writer(path_or_file, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return
    with open(path_or_file, "w", newline="") as fh:
        _write_csv(fh, header, rows)


def bin_index(j, k, l):
    """1-based bin index ``(j - 1) * l + k`` for state cell j and action cell k."""
    return (j - 1) * l + k


def state_cell_index(i, l):
    """1-based state cell of 1-based bin ``i``: ``ceil(i / l)``."""
    return math.ceil(i / l)


class BinPartition:
    """Product grid over a truncated state box and action box.

    All indices here are 0-based: bin ``i = j * n_action_cells + k`` pairs state
    cell ``j`` with action cell ``k``. Points outside a box are clamped to the
    nearest cell.
    """

    def __init__(self, state_low, state_high, state_cells, action_low, action_high, action_cells):
        self.state_low = np.atleast_1d(np.asarray(state_low, dtype=float))
        self.state_high = np.atleast_1d(np.asarray(state_high, dtype=float))
        self.state_cells = np.atleast_1d(np.asarray(state_cells, dtype=int))
        self.action_low = np.atleast_1d(np.asarray(action_low, dtype=float))
        self.action_high = np.atleast_1d(np.asarray(action_high, dtype=float))
        self.action_cells = np.atleast_1d(np.asarray(action_cells, dtype=int))
        if np.any(self.state_cells < 1) or np.any(self.action_cells < 1):
            raise ValueError("every axis needs at least one cell")
        if np.any(self.state_high <= self.state_low) or np.any(self.action_high <= self.action_low):
            raise ValueError("empty box")
        self.m = int(np.prod(self.state_cells))
        self.l = int(np.prod(self.action_cells))
        self.n_bins = self.m * self.l
        self._s_width = (self.state_high - self.state_low) / self.state_cells
        self._a_width = (self.action_high - self.action_low) / self.action_cells
        self.action_midpoints = self._cell_centers(self.action_low, self._a_width, self.action_cells)
        self.state_centers = self._cell_centers(self.state_low, self._s_width, self.state_cells)

    @classmethod
    def uniform(cls, dim_state, dim_action, state_cells, action_cells,
                state_box=(-2.0, 2.0), action_box=(-4.0, 4.0)):
        return cls([state_box[0]] * dim_state, [state_box[1]] * dim_state,
                   [state_cells] * dim_state if np.isscalar(state_cells) else state_cells,
                   [action_box[0]] * dim_action, [action_box[1]] * dim_action,
                   [action_cells] * dim_action if np.isscalar(action_cells) else action_cells)

    @staticmethod
    def _cell_centers(low, width, cells):
        axes = [low[d] + width[d] * (np.arange(cells[d]) + 0.5) for d in range(len(cells))]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=-1)

    @staticmethod
    def _cell(x, low, width, cells):
        x = np.asarray(x, dtype=float)
        idx = np.floor((x - low) / width).astype(int)
        idx = np.clip(idx, 0, cells - 1)
        flat = np.zeros(idx.shape[:-1], dtype=int)
        for d in range(len(cells)):
            flat = flat * cells[d] + idx[..., d]
        return flat

    def state_cell(self, x):
        x = np.asarray(x, dtype=float)
        return self._cell(x if x.ndim else x.reshape(1), self.state_low, self._s_width, self.state_cells)

    def action_cell(self, a):
        a = np.asarray(a, dtype=float)
        return self._cell(a if a.ndim else a.reshape(1), self.action_low, self._a_width, self.action_cells)

    def bin_of(self, x, a):
        return self.state_cell(x) * self.l + self.action_cell(a)

    def state_cell_of_bin(self, i):
        return np.asarray(i) // self.l

    def action_cell_of_bin(self, i):
        return np.asarray(i) % self.l

    def midpoint_action(self, i):
        return self.action_midpoints[self.action_cell_of_bin(i)]

    def state_cell_bounds(self, j):
        """Lower and upper corners of state cell ``j``."""
        idx = np.unravel_index(j, tuple(self.state_cells))
        lo = self.state_low + self._s_width * np.array(idx)
        return lo, lo + self._s_width

    def action_cell_bounds(self, k):
        idx = np.unravel_index(k, tuple(self.action_cells))
        lo = self.action_low + self._a_width * np.array(idx)
        return lo, lo + self._a_width

    def sample_state_in_cell(self, j, rng):
        lo, hi = self.state_cell_bounds(j)
        return rng.uniform(lo, hi)

    def to_csv(self, path_or_file):
        d, k = len(self.state_cells), len(self.action_cells)
        header = (["bin", "state_cell", "action_cell"]
                  + [f"x{q}_lo" for q in range(d)] + [f"x{q}_hi" for q in range(d)]
                  + [f"a{q}_lo" for q in range(k)] + [f"a{q}_hi" for q in range(k)]
                  + [f"a{q}_mid" for q in range(k)])
        rows = []
        for i in range(self.n_bins):
            j, kk = int(self.state_cell_of_bin(i)), int(self.action_cell_of_bin(i))
            slo, shi = self.state_cell_bounds(j)
            alo, ahi = self.action_cell_bounds(kk)
            vals = [*slo, *shi, *alo, *ahi, *self.action_midpoints[kk]]
            rows.append([i, j, kk, *map(lambda v: repr(float(v)), vals)])
        _write_csv(path_or_file, header, rows)
