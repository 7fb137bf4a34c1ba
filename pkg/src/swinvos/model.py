"""Model assembly, the inference memory-retention policy, and training.

A ``Model`` bundles the query encoder, the memory path (video encoder or
the image-only ablation path), per-path key/value projectors, and the
decoder. Inference walks a sequence frame by frame: the ``MemoryBank``
keeps the first frame, the previous frame, and every stride-th frame;
multi-object segmentation runs one read/decode per object over shared
query features and merges by soft aggregation. Training follows the
three-frame protocol: ground truth seeds the memory, frame 1's prediction
is both a loss term and the memory for frame 2.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import engine
from .decoder import Decoder, predict_labels, soft_aggregate
from .encoders import (
    EncoderConfig,
    ImageEncoder,
    ImageOnlyMemoryEncoder,
    KeyValueProjector,
    VideoEncoder,
    heads_for,
)
from .engine import Module, Tape, Tensor
from .errors import ConfigError, DimensionError, NumericError, UsageError
from .memread import ReadGeometry, READ_MODES, read_all
from .data import sample_training_triplet

VARIANTS = {
    "nano": dict(dim=8, depths=(1, 1, 2, 1), window=4, temporal_window=1,
                 decoder_width=32),
    "T": dict(dim=96, depths=(2, 2, 6, 2), window=7, temporal_window=8,
              decoder_width=256),
    "S": dict(dim=96, depths=(2, 2, 18, 2), window=7, temporal_window=8,
              decoder_width=256),
    "B": dict(dim=128, depths=(2, 2, 18, 2), window=12, temporal_window=8,
              decoder_width=256),
    "L": dict(dim=192, depths=(2, 2, 18, 2), window=12, temporal_window=8,
              decoder_width=256),
}

MEMORY_POLICIES = ("every8", "firstprev")
ENCODER_MODES = ("full", "image_only")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "nano"
    k: int = 128
    memory_policy: str = "every8"
    memory_stride: int = 8
    other_mask_enabled: bool = True
    encoder_mode: str = "full"
    read_mode: str = "hierarchical_topk"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}, expected one of {sorted(VARIANTS)}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.memory_policy not in MEMORY_POLICIES:
            raise ConfigError(f"memory policy must be one of {MEMORY_POLICIES}")
        if self.memory_stride < 1:
            raise ConfigError(f"memory stride must be positive, got {self.memory_stride}")
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"encoder mode must be one of {ENCODER_MODES}")
        if self.read_mode not in READ_MODES:
            raise ConfigError(f"read mode must be one of {READ_MODES}")

    @property
    def dim(self):
        return VARIANTS[self.variant]["dim"]

    @property
    def depths(self):
        return VARIANTS[self.variant]["depths"]

    @property
    def window(self):
        return VARIANTS[self.variant]["window"]

    @property
    def temporal_window(self):
        return VARIANTS[self.variant]["temporal_window"]

    @property
    def decoder_width(self):
        return VARIANTS[self.variant]["decoder_width"]

    def encoder_config(self):
        return EncoderConfig(dim=self.dim, depths=self.depths, window=self.window,
                             temporal_window=self.temporal_window,
                             heads=heads_for(self.dim),
                             use_other_mask=self.other_mask_enabled)

    def canonical(self):
        """Stable key=value text used for checkpoint embedding and --dump-config."""
        items = [
            ("variant", self.variant),
            ("dim", self.dim),
            ("depths", ",".join(str(d) for d in self.depths)),
            ("window", self.window),
            ("temporal_window", self.temporal_window),
            ("decoder_width", self.decoder_width),
            ("k", self.k),
            ("memory_policy", self.memory_policy),
            ("memory_stride", self.memory_stride),
            ("other_mask_enabled", int(self.other_mask_enabled)),
            ("encoder_mode", self.encoder_mode),
            ("read_mode", self.read_mode),
        ]
        return "\n".join(f"{k}={v}" for k, v in items) + "\n"

    @classmethod
    def from_canonical(cls, text):
        pairs = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            pairs[key] = value
        try:
            return cls(variant=pairs["variant"], k=int(pairs["k"]),
                       memory_policy=pairs["memory_policy"],
                       memory_stride=int(pairs["memory_stride"]),
                       other_mask_enabled=bool(int(pairs["other_mask_enabled"])),
                       encoder_mode=pairs["encoder_mode"],
                       read_mode=pairs["read_mode"])
        except KeyError as err:
            raise ConfigError(f"config text missing field {err}") from err


class Model(Module):
    def __init__(self, config, rng, dtype=engine.DEFAULT_DTYPE):
        enc_cfg = config.encoder_config()
        self.query_encoder = ImageEncoder(enc_cfg, rng, dtype=dtype)
        if config.encoder_mode == "full":
            self.memory_encoder = VideoEncoder(enc_cfg, rng, dtype=dtype)
        else:
            self.image_only_memory = ImageOnlyMemoryEncoder(enc_cfg, rng, dtype=dtype)
        self.query_proj = KeyValueProjector(config.dim, rng, dtype=dtype)
        self.memory_proj = KeyValueProjector(config.dim, rng, dtype=dtype)
        self.decoder = Decoder(config.dim, config.decoder_width, rng, dtype=dtype)
        self.config = config
        self.dtype = dtype

    def encode_memory(self, frames, targets, others):
        if self.config.encoder_mode == "full":
            return self.memory_encoder(frames, targets, others)
        return self.image_only_memory(self.query_encoder, frames, targets, others)

    def parameter_count(self):
        return sum(p.value.size for _, p in self.named_parameters())

    def encoder_parameter_count(self):
        """Parameters of the two encoders plus their key/value projectors."""
        prefixes = ("query_encoder", "memory_encoder", "image_only_memory",
                    "query_proj", "memory_proj")
        return sum(p.value.size for name, p in self.named_parameters()
                   if name.startswith(prefixes))


def init_model(config, seed, dtype=engine.DEFAULT_DTYPE):
    """Deterministic initialization: truncated normal sigma 0.02 for weights,
    ones for norm gains, zeros for biases, all drawn from one seeded RNG."""
    return Model(config, np.random.default_rng(seed), dtype=dtype)


class MemoryBank:
    """Retained past frames and per-object masks under the retention policy.

    Membership at time t: frame 0, frame t-1, and (every8 policy) every
    stride-th frame, deduplicated and sorted by frame index.
    """

    def __init__(self, policy="every8", stride=8):
        if policy not in MEMORY_POLICIES:
            raise ConfigError(f"memory policy must be one of {MEMORY_POLICIES}")
        self.policy = policy
        self.stride = stride
        self._permanent = {}
        self._previous = None
        self.n_objects = None

    @property
    def initialized(self):
        return 0 in self._permanent

    def initialize(self, frame, first_mask):
        """Seed with frame 0 and its ground-truth label map."""
        n_objects = int(np.max(first_mask))
        if n_objects < 1:
            raise UsageError("first mask labels no objects")
        probs = np.stack([(np.asarray(first_mask) == m + 1).astype(np.float32)
                          for m in range(n_objects)])
        self._permanent = {0: (np.asarray(frame), probs)}
        self._previous = None
        self.n_objects = n_objects

    def admit(self, index, frame, probs):
        """Record a segmented frame: becomes the previous frame, and is
        retained permanently when the policy keeps it."""
        if not self.initialized:
            raise UsageError("memory bank not initialized with frame 0")
        entry = (np.asarray(frame), np.asarray(probs))
        self._previous = (index, entry)
        if self.policy == "every8" and index % self.stride == 0:
            self._permanent[index] = entry

    def entries(self):
        """Sorted, deduplicated (index, frame, probs) list."""
        if not self.initialized:
            raise UsageError("memory bank not initialized with frame 0")
        merged = dict(self._permanent)
        if self._previous is not None:
            merged.setdefault(self._previous[0], self._previous[1])
        return [(i,) + merged[i] for i in sorted(merged)]

    def frame_indices(self):
        return [i for i, _, _ in self.entries()]


def membership_law(t, policy="every8", stride=8):
    """Reference predicate: which frame indices are in memory at time t."""
    members = {0}
    if t >= 1:
        members.add(t - 1)
    if policy == "every8":
        members.update(i for i in range(0, t, stride))
    return sorted(members)


def _object_mask_tensors(probs, m, other_enabled):
    """Target and other masks [T, H, W, 1] for object m from [T, M, H, W]."""
    target = probs[:, m]
    if probs.shape[1] == 1 or not other_enabled:
        other = np.zeros_like(target)
    else:
        rest = np.delete(probs, m, axis=1)
        other = rest.max(axis=1)
    return (Tensor(target[..., None]), Tensor(other[..., None]))


def _forward_frame(model, query_feats, mem_frames, mem_probs, out_hw):
    """Shared forward: read + decode per object, soft aggregation.

    mem_frames: [T, H, W, 3] ndarray; mem_probs: per-object mask tensors,
    either an ndarray [T, M, H, W] or a list of per-object (target, other)
    Tensor pairs already built (training feeds watched tensors through).
    Returns (class_dist, per_object_probs list).
    """
    cfg = model.config
    query_kv = [model.query_proj(query_feats, s) for s in (1, 2, 3, 4)]
    h4, w4 = query_feats.stage(4).shape[:2]
    frames_t = Tensor(mem_frames) if not isinstance(mem_frames, Tensor) else mem_frames
    per_object = []
    n_objects = (mem_probs.shape[1] if isinstance(mem_probs, np.ndarray)
                 else len(mem_probs))
    for m in range(n_objects):
        if isinstance(mem_probs, np.ndarray):
            target, other = _object_mask_tensors(mem_probs, m, cfg.other_mask_enabled)
        else:
            target, other = mem_probs[m]
        mem_feats = model.encode_memory(frames_t, target, other)
        geom = ReadGeometry.from_features(mem_feats)
        memory_kv = [model.memory_proj(mem_feats, s) for s in (1, 2, 3, 4)]
        ys, _ = read_all(query_kv, memory_kv, geom, cfg.k, cfg.read_mode)
        fg = model.decoder(ys, (h4, w4), out_hw)
        per_object.append(fg)
    dist = soft_aggregate(per_object)
    return dist, per_object


def segment_frame(model, bank, frame, index):
    """Segment one frame against the bank; admit the prediction.

    Returns (label map [H, W], per-object aggregated probabilities
    [M, H, W], updated bank).
    """
    if not bank.initialized:
        raise UsageError("memory bank must be initialized with frame 0 first")
    frame = np.asarray(frame)
    entries = bank.entries()
    mem_frames = np.stack([f for _, f, _ in entries])
    if mem_frames.shape[1:3] != frame.shape[:2]:
        raise DimensionError(
            f"frame extents {frame.shape[:2]} differ from memory "
            f"{mem_frames.shape[1:3]}")
    mem_probs = np.stack([p for _, _, p in entries])  # [T, M, H, W]
    query_feats = model.query_encoder(Tensor(frame.astype(model.dtype)))
    dist, _ = _forward_frame(model, query_feats, mem_frames.astype(model.dtype),
                             mem_probs.astype(model.dtype), frame.shape[:2])
    if not np.isfinite(dist.data).all():
        raise NumericError(f"non-finite class distribution at frame {index}")
    labels = predict_labels(dist)
    object_probs = dist.data[1:]
    bank.admit(index, frame, object_probs)
    return labels, object_probs, bank


def run_sequence(model, frames, first_mask, policy=None, stride=None):
    """Propagate the first mask through a sequence.

    Frame 0's output is the given mask verbatim; later frames are predicted
    and fed back into the bank. Returns (label maps, per-frame seconds);
    the timing for frame 0 is 0.0.
    """
    if len(frames) == 0:
        raise UsageError("empty sequence")
    first_mask = np.asarray(first_mask)
    if frames[0].shape[:2] != first_mask.shape:
        raise DimensionError(
            f"first frame {frames[0].shape[:2]} vs mask {first_mask.shape}")
    cfg = model.config
    bank = MemoryBank(policy or cfg.memory_policy, stride or cfg.memory_stride)
    bank.initialize(frames[0], first_mask)
    labels = [first_mask.astype(np.int64)]
    timings = [0.0]
    for t in range(1, len(frames)):
        if frames[t].shape != frames[0].shape:
            raise DimensionError(
                f"frame {t} extents {frames[t].shape} differ from frame 0")
        t0 = time.perf_counter()
        out, _, bank = segment_frame(model, bank, frames[t], t)
        timings.append(time.perf_counter() - t0)
        labels.append(out)
    return labels, timings


def cross_entropy(class_dist, labels):
    """Mean pixel-wise negative log-likelihood of an (M+1)-class map."""
    n_classes = class_dist.shape[0]
    labels = np.asarray(labels)
    if labels.max(initial=0) >= n_classes:
        raise DimensionError(
            f"label {labels.max()} out of range for {n_classes} classes")
    flat = engine.reshape(class_dist, (n_classes, -1))
    picked = engine.take_along(flat, labels.reshape(1, -1), axis=0)
    return engine.neg(engine.tmean(engine.log(picked)))


def train_step(model, frames, masks, lr):
    """One optimization step on a temporally ordered triplet.

    Frame 0's ground truth seeds the memory; frames 1 and 2 are predicted
    in turn, with frame 1's prediction entering the memory (gradients flow
    through it). Returns the scalar loss.
    """
    if len(frames) != 3 or len(masks) != 3:
        raise UsageError("training consumes exactly three frames and masks")
    cfg = model.config
    n_objects = int(max(np.max(m) for m in masks))
    if n_objects < 1:
        raise UsageError("triplet labels no objects")
    hw = frames[0].shape[:2]
    first_probs = np.stack([(masks[0] == m + 1).astype(model.dtype)
                            for m in range(n_objects)])

    with Tape() as tape:
        losses = []
        mem_frames = [frames[0].astype(model.dtype)]
        # per object: list of [T, H, W, 1] target/other mask tensors
        mem_probs = [Tensor(first_probs[None])]
        for step in (1, 2):
            frame = frames[step].astype(model.dtype)
            query_feats = model.query_encoder(Tensor(frame))
            stack = np.stack(mem_frames)
            pairs = _training_mask_pairs(mem_probs, n_objects,
                                         cfg.other_mask_enabled)
            dist, _ = _forward_frame(model, query_feats, stack, pairs, hw)
            losses.append(cross_entropy(dist, masks[step]))
            if step == 1:
                # feed the aggregated per-object maps back, as inference does
                mem_frames.append(frame)
                mem_probs.append(engine.reshape(dist[1:], (1, n_objects) + hw))
        loss = engine.mul(engine.add(losses[0], losses[1]), 0.5)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"training loss diverged: {value}")
    engine.backward(loss, tape)
    engine.adam_step([p for _, p in model.named_parameters()], lr=lr)
    return value


def _training_mask_pairs(mem_probs, n_objects, other_enabled):
    """Build per-object (target, other) [T, H, W, 1] tensors from a list of
    per-frame [1, M, H, W] probability tensors (watched during training)."""
    stacked = engine.concat(mem_probs, axis=0) if len(mem_probs) > 1 else mem_probs[0]
    pairs = []
    for m in range(n_objects):
        target = stacked[:, m]
        if n_objects == 1 or not other_enabled:
            other = Tensor(np.zeros(target.shape + (1,), dtype=target.dtype))
        else:
            rest = None
            for j in range(n_objects):
                if j == m:
                    continue
                rest = stacked[:, j] if rest is None \
                    else engine.maximum(rest, stacked[:, j])
            other = engine.reshape(rest, rest.shape + (1,))
        pairs.append((engine.reshape(target, target.shape + (1,)), other))
    return pairs


def train_toy(model, sample, steps, lr, seed=0, curriculum=True, max_interval=25):
    """Overfit on one synthetic video; returns the loss curve.

    The triplet-sampling interval cap grows linearly from 0 to
    ``max_interval`` (clamped to the sequence length) over the schedule;
    with ``curriculum`` off the cap is fixed at its final value.
    """
    if steps == 0:
        return []
    rng = np.random.default_rng(seed)
    n = len(sample.frames)
    final_cap = max(1, min(max_interval, n - 1))
    curve = []
    for step in range(steps):
        if curriculum and steps > 1:
            cap = max(1, round(final_cap * step / (steps - 1)))
        else:
            cap = final_cap
        i1, i2, i3 = sample_training_triplet(n, cap, rng)
        frames = [sample.frames[i] for i in (i1, i2, i3)]
        masks = [sample.masks[i] for i in (i1, i2, i3)]
        curve.append(train_step(model, frames, masks, lr))
    return curve
