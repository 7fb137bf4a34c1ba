"""Query (image) and memory (video) encoders.

Both encoders are four-stage pyramids of windowed-attention blocks joined
by patch merging. Stage i halves the spatial resolution of stage i-1 and
doubles its channels; the memory encoder keeps the temporal extent fixed
across stages. Inputs are zero-padded to a multiple of 32 on the right and
bottom; padded tokens are masked out of attention and the per-stage valid
extents travel with the features.
"""

from dataclasses import dataclass

from . import engine
from .attention import PatchEmbedImage, PatchEmbedVideo, PatchMerge, SwinBlock, _patchify
from .engine import Linear, Module, Tensor
from .errors import ConfigError, DimensionError, UsageError

N_STAGES = 4
PATCH = 4  # spatial patch extent; temporal patch extent is 1


@dataclass(frozen=True)
class EncoderConfig:
    dim: int
    depths: tuple
    window: int
    temporal_window: int
    heads: tuple
    use_other_mask: bool = True

    def __post_init__(self):
        if self.dim % 8:
            raise ConfigError(f"base channels must be divisible by 8, got {self.dim}")
        if len(self.depths) != N_STAGES or len(self.heads) != N_STAGES:
            raise ConfigError("depths and heads must list all four stages")
        for d in self.depths:
            if d != 1 and d % 2:
                raise ConfigError(f"stage depths must be even or 1, got {self.depths}")
        if self.window <= 0 or self.temporal_window <= 0:
            raise ConfigError("window extents must be positive")
        for i, h in enumerate(self.heads):
            if self.stage_dim(i + 1) % h:
                raise ConfigError(f"heads {h} do not divide stage {i + 1} channels")

    def stage_dim(self, stage):
        return self.dim * 2 ** (stage - 1)


@dataclass
class StageFeatures:
    """Per-stage feature maps: [(T,) H_i, W_i, C_i], with H_i = H/2^(i+1)."""
    features: list
    valid: list          # (vh, vw) per stage, valid token extents before padding
    orig_size: tuple     # input (H, W) in pixels
    temporal: int | None = None  # T for memory features, None for query

    def stage(self, i):
        return self.features[i - 1]


def _pad_frame(x, multiple):
    """Right/bottom zero-pad the two leading spatial axes to a multiple."""
    *lead, h, w, c = x.shape
    ph = -(-h // multiple) * multiple
    pw = -(-w // multiple) * multiple
    if (ph, pw) == (h, w):
        return x
    widths = tuple((0, 0) for _ in lead) + ((0, ph - h), (0, pw - w), (0, 0))
    return engine.pad(x, widths)


class _StageStack(Module):
    """The shared four-stage pyramid over embedded tokens."""

    def __init__(self, config, window, rng, dtype):
        self.stages = []
        self.merges = []
        for i in range(N_STAGES):
            dim = config.stage_dim(i + 1)
            blocks = [SwinBlock(dim, config.heads[i], window, shifted=(j % 2 == 1),
                                rng=rng, dtype=dtype)
                      for j in range(config.depths[i])]
            self.stages.append(blocks)
            if i < N_STAGES - 1:
                self.merges.append(PatchMerge(dim, rng, dtype=dtype))

    def __call__(self, tokens, valid, temporal=None):
        features = []
        valids = []
        vh, vw = valid
        x = tokens
        for i in range(N_STAGES):
            extents = (vh, vw) if temporal is None else (temporal, vh, vw)
            for block in self.stages[i]:
                x = block(x, valid=extents)
            features.append(x)
            valids.append((vh, vw))
            if i < N_STAGES - 1:
                x = self.merges[i](x)
                vh = -(-vh // 2)
                vw = -(-vw // 2)
        return features, valids


class ImageEncoder(Module):
    """Spatial feature pyramid over a single frame."""

    def __init__(self, config, rng, dtype=engine.DEFAULT_DTYPE):
        self.patch_embed = PatchEmbedImage(config.dim, rng, dtype=dtype)
        self.stack = _StageStack(config, (config.window, config.window), rng, dtype)

    def __call__(self, frame):
        h, w, c = frame.shape
        if c != 3:
            raise DimensionError(f"expected an RGB frame, got shape {frame.shape}")
        padded = _pad_frame(frame, PATCH * 2 ** (N_STAGES - 1))
        tokens = self.patch_embed(padded)
        valid = (-(-h // PATCH), -(-w // PATCH))
        features, valids = self.stack(tokens, valid)
        return StageFeatures(features, valids, (h, w))

    def encode_tokens(self, tokens, valid):
        """Run the pyramid from pre-embedded tokens (image-only memory path)."""
        features, valids = self.stack(tokens, valid)
        return features, valids


class VideoEncoder(Module):
    """Spatiotemporal feature pyramid over past frames and their masks."""

    def __init__(self, config, rng, dtype=engine.DEFAULT_DTYPE):
        self.patch_embed = PatchEmbedVideo(config.dim, rng,
                                           use_other_mask=config.use_other_mask,
                                           dtype=dtype)
        window = (config.temporal_window, config.window, config.window)
        self.stack = _StageStack(config, window, rng, dtype)

    def __call__(self, frames, target_masks, other_masks):
        if frames.ndim != 4 or frames.shape[0] == 0:
            raise UsageError(f"need at least one memory frame, got shape {frames.shape}")
        t, h, w, _ = frames.shape
        multiple = PATCH * 2 ** (N_STAGES - 1)
        frames = _pad_frame(frames, multiple)
        target_masks = _pad_frame(target_masks, multiple)
        other_masks = _pad_frame(other_masks, multiple)
        tokens = self.patch_embed(frames, target_masks, other_masks)
        valid = (-(-h // PATCH), -(-w // PATCH))
        features, valids = self.stack(tokens, valid, temporal=t)
        return StageFeatures(features, valids, (h, w), temporal=t)


class ImageOnlyMemoryEncoder(Module):
    """Ablation memory path: the query encoder applied per past frame.

    Masks are fused at the embedding by learned linear projections of the
    mask patches, added to the image patch embedding before its norm. The
    per-frame pyramids are stacked along time.
    """

    def __init__(self, config, rng, dtype=engine.DEFAULT_DTYPE):
        p2 = PATCH * PATCH
        self.embed_target = Linear(p2, config.dim, rng, dtype=dtype)
        self.embed_other = (Linear(p2, config.dim, rng, dtype=dtype)
                            if config.use_other_mask else None)
        self.use_other_mask = config.use_other_mask

    def __call__(self, image_encoder, frames, target_masks, other_masks):
        if frames.ndim != 4 or frames.shape[0] == 0:
            raise UsageError(f"need at least one memory frame, got shape {frames.shape}")
        t, h, w, _ = frames.shape
        multiple = PATCH * 2 ** (N_STAGES - 1)
        frames = _pad_frame(frames, multiple)
        target_masks = _pad_frame(target_masks, multiple)
        other_masks = _pad_frame(other_masks, multiple)
        valid = (-(-h // PATCH), -(-w // PATCH))
        per_stage = [[] for _ in range(N_STAGES)]
        valids = None
        embed = image_encoder.patch_embed
        for ti in range(t):
            tokens = engine.add(embed.embed(_patchify(frames[ti], PATCH)),
                                self.embed_target(_patchify(target_masks[ti], PATCH)))
            if self.use_other_mask:
                tokens = engine.add(tokens,
                                    self.embed_other(_patchify(other_masks[ti], PATCH)))
            tokens = embed.norm(tokens)
            features, valids = image_encoder.encode_tokens(tokens, valid)
            for i, f in enumerate(features):
                per_stage[i].append(engine.reshape(f, (1,) + f.shape))
        stacked = [engine.concat(fs, axis=0) if len(fs) > 1 else fs[0]
                   for fs in per_stage]
        return StageFeatures(stacked, valids, (h, w), temporal=t)


@dataclass
class KeyValueMaps:
    """key: [C_i/8, N]; value: [C_i/2, N] with positions flattened row-major
    (time-major for memory: (t, x, y) -> t*H_i*W_i + x*W_i + y)."""
    key: Tensor
    value: Tensor


class KeyValueProjector(Module):
    """Per-stage linear (1x1, no bias) projections to key and value maps."""

    def __init__(self, base_dim, rng, dtype=engine.DEFAULT_DTYPE):
        if base_dim % 8:
            raise ConfigError(f"stage channels must divide by 8, got base {base_dim}")
        self.keys = []
        self.values = []
        for i in range(N_STAGES):
            dim = base_dim * 2 ** i
            self.keys.append(Linear(dim, dim // 8, rng, bias=False, dtype=dtype))
            self.values.append(Linear(dim, dim // 2, rng, bias=False, dtype=dtype))

    def __call__(self, features, stage):
        """Project stage ``stage`` (1..4) of a StageFeatures to KeyValueMaps."""
        if not 1 <= stage <= N_STAGES:
            raise UsageError(f"stage must be 1..4, got {stage}")
        f = features.stage(stage)
        c = f.shape[-1]
        flat = engine.reshape(f, (-1, c))
        key = engine.transpose(self.keys[stage - 1](flat), (1, 0))
        value = engine.transpose(self.values[stage - 1](flat), (1, 0))
        return KeyValueMaps(key, value)


def heads_for(dim):
    """Stage head counts {h, 2h, 4h, 8h} with h = max(dim/32, 1)."""
    base = max(dim // 32, 1)
    return tuple(base * 2 ** i for i in range(N_STAGES))
