"""Multi-scale memory read: dense matching at the coarsest stage, top-k
sparse matching at the finer stages.

Stage-4 affinities are plain key dot products (no sqrt-d scaling), softmaxed
along the memory axis; the read output concatenates the query value map with
the affinity-weighted memory values along the feature axis. Each finer stage
reads only the memory positions obtained by expanding the stage-4 top-k
cells into r x r spatial blocks (r = 2^(4-i), same frame), so a query pixel
at stage i attends to 4^(4-i) * k positions. All query pixels inside one
stage-4 cell share that cell's index set, which lets the sparse read run as
batched per-cell matmuls.

Big instances are processed in chunks to bound peak memory; chunking only
splits rows, never a softmax, so results do not depend on the chunk size.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ConfigError, DimensionError, UsageError

READ_MODES = ("hierarchical_topk", "last_stage_only", "dense_all")

# elements per intermediate before a read falls back to row chunks (~128 MB f32)
_CHUNK_ELEMS = 32 * 1024 * 1024


@dataclass(frozen=True)
class ReadGeometry:
    """Grid geometry shared by all four stages: stage i is (h4, w4) * 2^(4-i)."""
    t: int
    h4: int
    w4: int

    def stage_hw(self, stage):
        r = 2 ** (4 - stage)
        return self.h4 * r, self.w4 * r

    def memory_cells(self, stage):
        h, w = self.stage_hw(stage)
        return self.t * h * w

    @classmethod
    def from_features(cls, memory_features):
        t = memory_features.temporal
        _, h4, w4 = memory_features.stage(4).shape[:3]
        return cls(t, h4, w4)


@dataclass
class TopKIndexSet:
    """Per stage-4 query cell: the k best memory cells, as linear indices
    t * h4 * w4 grid order. ``indices[q]`` is rank-ordered, ties broken by
    the lower linear index."""
    indices: np.ndarray  # [h4*w4, k_eff]
    geom: ReadGeometry

    @property
    def k(self):
        return self.indices.shape[1]

    def expand(self, stage):
        """Map the stage-4 sets to stage ``stage``: each (t, x4, y4) becomes
        the r x r spatial block {t} x [x4*r, x4*r+r) x [y4*r, y4*r+r)."""
        if stage not in (1, 2, 3):
            raise UsageError(f"index expansion targets stages 1..3, got {stage}")
        r = 2 ** (4 - stage)
        hi, wi = self.geom.stage_hw(stage)
        cells4 = self.geom.h4 * self.geom.w4
        t4 = self.indices // cells4
        rem = self.indices % cells4
        x4 = rem // self.geom.w4
        y4 = rem % self.geom.w4
        base = t4 * (hi * wi) + (x4 * r) * wi + (y4 * r)  # [Nq4, k]
        dx, dy = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
        block = (dx * wi + dy).reshape(-1)  # [r*r]
        out = base[:, :, None] + block[None, None, :]
        return out.reshape(self.indices.shape[0], -1)

    def for_query(self, stage, qx, qy):
        """The index set of the stage-``stage`` query pixel (qx, qy)."""
        r = 2 ** (4 - stage)
        cell = (qx // r) * self.geom.w4 + (qy // r)
        return self.expand(stage)[cell]


def _check_kv(kq, vq, km, vm):
    if kq.shape[0] != km.shape[0]:
        raise DimensionError(f"key rows differ: query {kq.shape} vs memory {km.shape}")
    if vq.shape[0] != vm.shape[0]:
        raise DimensionError(f"value rows differ: query {vq.shape} vs memory {vm.shape}")
    if kq.shape[1] != vq.shape[1]:
        raise DimensionError(f"query key/value columns differ: {kq.shape} vs {vq.shape}")
    if km.shape[1] != vm.shape[1]:
        raise DimensionError(f"memory key/value columns differ: {km.shape} vs {vm.shape}")


def dense_read(kq, vq, km, vm):
    """Dense space-time read: y = [vq ; vm @ softmax(kq^T km)^T].

    Affinities are raw dot products between C/8-dim keys at every
    query/memory location pair. Returns y of shape [C, Nq].
    """
    y, _ = _dense_read_impl(kq, vq, km, vm, want_raw=False)
    return y


def dense_read_stage4(kq, vq, km, vm):
    """Stage-4 dense read; also returns the raw (pre-softmax) affinities
    as an ndarray [Nq, Nm] for top-k selection."""
    return _dense_read_impl(kq, vq, km, vm, want_raw=True)


def _dense_read_impl(kq, vq, km, vm, want_raw):
    _check_kv(kq, vq, km, vm)
    nq = kq.shape[1]
    nm = km.shape[1]
    kq_t = engine.transpose(kq, (1, 0))
    chunk = max(1, _CHUNK_ELEMS // max(nm, 1))
    if want_raw or nq <= chunk:
        s = engine.matmul(kq_t, km)  # [Nq, Nm]
        w = engine.softmax(s, axis=1)
        readout = engine.transpose(engine.matmul(w, engine.transpose(vm, (1, 0))), (1, 0))
        y = engine.concat([vq, readout], axis=0)
        return y, (s.data if want_raw else None)
    parts = []
    for start in range(0, nq, chunk):
        rows = kq_t[start:start + chunk]
        s = engine.matmul(rows, km)
        w = engine.softmax(s, axis=1)
        parts.append(engine.matmul(w, engine.transpose(vm, (1, 0))))
    readout = engine.transpose(engine.concat(parts, axis=0), (1, 0))
    return engine.concat([vq, readout], axis=0), None


def select_topk(s_raw, k):
    """Per query row, the k largest raw affinities; ties pick the lower
    memory index; k is clamped to the row length."""
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    s_raw = np.asarray(s_raw)
    nm = s_raw.shape[1]
    k_eff = min(k, nm)
    # stable sort on negated values keeps equal entries in index order
    order = np.argsort(-s_raw, axis=1, kind="stable")
    return order[:, :k_eff]


def map_indices(omega4, stage, geom):
    """Expand stage-4 index sets to stage ``stage`` block index sets."""
    return TopKIndexSet(omega4, geom).expand(stage)


def topk_read(kq, vq, km, vm, omega, stage, geom):
    """Sparse read at a finer stage.

    ``omega``: [h4*w4, n] linear memory indices (row-major stage-4 cells),
    shared by the r x r query pixels inside each cell. Affinities are
    computed only over omega, softmaxed over that set, and used to mix the
    gathered value columns. Selection indices are constants of the forward
    pass; gradients reach the gathered positions by scatter-add.
    """
    _check_kv(kq, vq, km, vm)
    omega = np.asarray(omega)
    if omega.ndim != 2 or omega.size == 0:
        raise UsageError(f"empty or malformed index set with shape {omega.shape}")
    r = 2 ** (4 - stage)
    hi, wi = geom.stage_hw(stage)
    n_cells, n = omega.shape
    if n_cells != geom.h4 * geom.w4:
        raise DimensionError(
            f"index set has {n_cells} cells, geometry expects {geom.h4 * geom.w4}")
    if kq.shape[1] != hi * wi:
        raise DimensionError(f"query columns {kq.shape[1]} != stage grid {hi}x{wi}")
    if km.shape[1] != geom.t * hi * wi:
        raise DimensionError(
            f"memory columns {km.shape[1]} != {geom.t}x{hi}x{wi}")
    ck, cv = kq.shape[0], vq.shape[0]

    km_t = engine.transpose(km, (1, 0))  # [Nm, Ck]
    vm_t = engine.transpose(vm, (1, 0))  # [Nm, Cv]
    q_blocks = _to_cell_blocks(kq, geom, r)  # [n_cells, r*r, Ck]

    chunk = max(1, _CHUNK_ELEMS // max(n * max(ck, cv), 1))
    outs = []
    for start in range(0, n_cells, chunk):
        stop = min(start + chunk, n_cells)
        idx = omega[start:stop]
        kg = engine.take(km_t, idx, axis=0)          # [cells, n, Ck]
        vg = engine.take(vm_t, idx, axis=0)          # [cells, n, Cv]
        qb = q_blocks[start:stop]                    # [cells, r*r, Ck]
        s = engine.matmul(qb, engine.transpose(kg, (0, 2, 1)))  # [cells, r*r, n]
        w = engine.softmax(s, axis=-1)
        outs.append(engine.matmul(w, vg))            # [cells, r*r, Cv]
    mixed = engine.concat(outs, axis=0) if len(outs) > 1 else outs[0]
    readout = _from_cell_blocks(mixed, geom, r, cv)
    return engine.concat([vq, readout], axis=0)


def _to_cell_blocks(kq, geom, r):
    """[C, Hi*Wi] -> [h4*w4, r*r, C]: group stage-i pixels by stage-4 cell."""
    c = kq.shape[0]
    h4, w4 = geom.h4, geom.w4
    x = engine.reshape(kq, (c, h4, r, w4, r))
    x = engine.transpose(x, (1, 3, 2, 4, 0))  # [h4, w4, r, r, C]
    return engine.reshape(x, (h4 * w4, r * r, c))


def _from_cell_blocks(x, geom, r, c):
    """[h4*w4, r*r, C] -> [C, Hi*Wi]: inverse of _to_cell_blocks."""
    h4, w4 = geom.h4, geom.w4
    y = engine.reshape(x, (h4, w4, r, r, c))
    y = engine.transpose(y, (4, 0, 2, 1, 3))  # [C, h4, r, w4, r]
    return engine.reshape(y, (c, h4 * r * w4 * r))


def read_all(query_kv, memory_kv, geom, k, mode):
    """Run the full multi-scale read.

    query_kv / memory_kv: stage-indexed lists (index 0 = stage 1) of
    KeyValueMaps. Returns [y1, y2, y3, y4] (finer stages None in
    last_stage_only mode) plus the stage-4 index set (None unless top-k).
    """
    if mode not in READ_MODES:
        raise UsageError(f"unknown read mode {mode!r}, expected one of {READ_MODES}")
    ys = [None, None, None, None]
    if mode == "dense_all":
        for i in range(4):
            q, m = query_kv[i], memory_kv[i]
            ys[i] = dense_read(q.key, q.value, m.key, m.value)
        return ys, None
    q4, m4 = query_kv[3], memory_kv[3]
    y4, s4 = dense_read_stage4(q4.key, q4.value, m4.key, m4.value)
    ys[3] = y4
    if mode == "last_stage_only":
        return ys, None
    omega4 = TopKIndexSet(select_topk(s4, k), geom)
    for stage in (3, 2, 1):
        q, m = query_kv[stage - 1], memory_kv[stage - 1]
        omega = omega4.expand(stage)
        ys[stage - 1] = topk_read(q.key, q.value, m.key, m.value, omega, stage, geom)
    return ys, omega4


def random_kv(geom, base_dim, seed, dtype=np.float32):
    """Seeded random key/value maps for all four stages (query and memory)."""
    from .encoders import KeyValueMaps

    rng = np.random.default_rng(seed)
    query, memory = [], []
    for stage in (1, 2, 3, 4):
        h, w = geom.stage_hw(stage)
        ck = base_dim * 2 ** (stage - 1) // 8
        cv = base_dim * 2 ** (stage - 1) // 2
        nq = h * w
        nm = geom.t * nq
        query.append(KeyValueMaps(
            Tensor(rng.standard_normal((ck, nq)).astype(dtype)),
            Tensor(rng.standard_normal((cv, nq)).astype(dtype))))
        memory.append(KeyValueMaps(
            Tensor(rng.standard_normal((ck, nm)).astype(dtype)),
            Tensor(rng.standard_normal((cv, nm)).astype(dtype))))
    return query, memory


def bench(geom, base_dim, k, modes, seed=0):
    """Time each read stage per mode on seeded random key/value maps.

    Returns rows of (stage, mode, k, T, H, W, flops, wall_ns); stage "all"
    sums the mode. Selection time is charged to the stage-4 row; index
    expansion to the stage it feeds. H and W are input pixel extents.
    """
    query, memory = random_kv(geom, base_dim, seed)
    h_px, w_px = geom.h4 * 32, geom.w4 * 32
    rows = []
    for mode in modes:
        if mode not in READ_MODES:
            raise UsageError(f"unknown read mode {mode!r}")
        model = flops_mode(mode, geom, base_dim, k)
        stage_rows = []

        def _timed(stage, fn):
            t0 = time.perf_counter_ns()
            out = fn()
            wall = time.perf_counter_ns() - t0
            stage_rows.append((stage, mode, k, geom.t, h_px, w_px, model[stage], wall))
            return out

        q4, m4 = query[3], memory[3]
        if mode == "dense_all":
            for stage in (4, 3, 2, 1):
                q, m = query[stage - 1], memory[stage - 1]
                _timed(stage, lambda q=q, m=m: dense_read(q.key, q.value, m.key, m.value))
        elif mode == "last_stage_only":
            _timed(4, lambda: dense_read_stage4(q4.key, q4.value, m4.key, m4.value))
        else:
            def stage4():
                _, s4 = dense_read_stage4(q4.key, q4.value, m4.key, m4.value)
                return TopKIndexSet(select_topk(s4, k), geom)

            omega4 = _timed(4, stage4)
            for stage in (3, 2, 1):
                q, m = query[stage - 1], memory[stage - 1]

                def run(stage=stage, q=q, m=m):
                    omega = omega4.expand(stage)
                    return topk_read(q.key, q.value, m.key, m.value, omega, stage, geom)

                _timed(stage, run)
        total_ns = sum(r[-1] for r in stage_rows)
        total_fl = sum(r[-2] for r in stage_rows)
        rows.extend(sorted(stage_rows))
        rows.append(("all", mode, k, geom.t, h_px, w_px, total_fl, total_ns))
    return rows


def flops_dense(stage, geom, base_dim):
    """Analytic flop count of the dense read at one stage (matmuls + softmax;
    gathers and top-k selection are excluded from the model)."""
    h, w = geom.stage_hw(stage)
    nq = h * w
    nm = geom.t * nq
    ck = base_dim * 2 ** (stage - 1) // 8
    cv = base_dim * 2 ** (stage - 1) // 2
    return 2 * nq * nm * ck + 5 * nq * nm + 2 * nq * nm * cv


def flops_topk(stage, geom, base_dim, k):
    h, w = geom.stage_hw(stage)
    nq = h * w
    k_eff = min(k, geom.memory_cells(4))
    n = 4 ** (4 - stage) * k_eff
    ck = base_dim * 2 ** (stage - 1) // 8
    cv = base_dim * 2 ** (stage - 1) // 2
    return 2 * nq * n * ck + 5 * nq * n + 2 * nq * n * cv


def flops_mode(mode, geom, base_dim, k):
    """Per-stage flop model for a read mode; stage 4 is always dense."""
    per_stage = {}
    for stage in (1, 2, 3):
        if mode == "dense_all":
            per_stage[stage] = flops_dense(stage, geom, base_dim)
        elif mode == "hierarchical_topk":
            per_stage[stage] = flops_topk(stage, geom, base_dim, k)
        else:
            per_stage[stage] = 0
    per_stage[4] = flops_dense(4, geom, base_dim)
    return per_stage
