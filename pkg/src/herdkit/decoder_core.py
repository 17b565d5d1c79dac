"""Forward-only promptable decoder mechanics (no training).

Query tokens are laid out group-major, in the order params, box, kp2d, kp3d,
prompt; group ``g`` occupies ``P * count_g`` consecutive rows and slot ``i``
owns rows ``start_g + i * count_g ... + count_g``.  Each layer

1. mixes tokens within each instance slot (residual self-attention),
2. concatenates the result with the previous layer's tokens along the
   feature axis and cross-attends to the image features (the output replaces
   the tokens, so every output row is a convex combination of value rows),
3. refreshes the kp2d tokens from predicted 2D keypoints and sampled image
   features, and the kp3d tokens from root-relative 3D keypoints.

Final predictions are read out from the params and box groups only.
Weights are random per seed or loaded from an ``.npz`` container.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

GROUPS = ("params", "box", "kp2d", "kp3d", "prompt")
KP3D_SCALE = 1.0
ENCODER_SEED = 20240611
WEIGHTS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DecoderConfig:
    n_instances: int = 4
    group_sizes: tuple[int, ...] = (2, 1, 4, 4, 2)  # params, box, kp2d, kp3d, prompt
    width: int = 32
    n_layers: int = 3
    n_heads: int = 1
    grid: tuple[int, int, int] = (8, 8, 16)  # H0, W0, C0
    patch: int = 16
    n_prompt_keypoints: int = 26
    n_out_keypoints: int = 26
    n_betas: int = 10
    n_joints: int = 15

    def __post_init__(self):
        if len(self.group_sizes) != len(GROUPS) or min(self.group_sizes) < 1:
            raise ValueError("group_sizes needs one positive count per group")
        if self.group_sizes[GROUPS.index("prompt")] < 2:
            raise ValueError("the prompt group needs a mask token and at least one keypoint token")
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")
        if self.n_layers < 0 or self.n_instances < 1:
            raise ValueError("n_layers >= 0 and n_instances >= 1 required")

    @classmethod
    def full_scale(cls) -> "DecoderConfig":
        return cls(
            n_instances=30,
            group_sizes=(325, 1, 26, 26, 27),
            width=1024,
            n_layers=6,
            n_heads=8,
            grid=(32, 32, 1280),
            patch=16,
            n_prompt_keypoints=26,
            n_out_keypoints=26,
            n_betas=145,
            n_joints=35,
        )

    @property
    def tokens_per_instance(self) -> int:
        return sum(self.group_sizes)

    @property
    def n_tokens(self) -> int:
        return self.n_instances * self.tokens_per_instance

    @property
    def n_params(self) -> int:
        return self.n_betas + 3 * self.n_joints + 3

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid[0] * self.patch, self.grid[1] * self.patch

    def count(self, group: str) -> int:
        return self.group_sizes[GROUPS.index(group)]

    def group_slice(self, group: str) -> slice:
        k = GROUPS.index(group)
        start = self.n_instances * sum(self.group_sizes[:k])
        return slice(start, start + self.n_instances * self.group_sizes[k])


@dataclass(frozen=True)
class DropoutConfig:
    p_mask_drop: float = 0.5
    p_kp_prompt_drop: float = 0.2
    kp_mask_rate_max: float = 0.7

    def __post_init__(self):
        for v in (self.p_mask_drop, self.p_kp_prompt_drop, self.kp_mask_rate_max):
            if not 0.0 <= v <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class ImageFeatureMap:
    grid: np.ndarray  # (H0, W0, C0) content features
    positional: np.ndarray  # (H0, W0, C0) fixed encoding added to keys only

    @property
    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1, self.grid.shape[-1])

    @property
    def flat_positional(self) -> np.ndarray:
        return self.positional.reshape(-1, self.positional.shape[-1])


@dataclass(frozen=True, eq=False)
class TokenState:
    tokens: np.ndarray  # (N, D)
    config: DecoderConfig
    layer: int = 0

    def __post_init__(self):
        if self.tokens.shape != (self.config.n_tokens, self.config.width):
            raise ValueError(f"token matrix must be {self.config.n_tokens} x {self.config.width}")

    def group(self, name: str) -> np.ndarray:
        """(P, count, D) copy of one token group."""
        c = self.config
        return self.tokens[c.group_slice(name)].reshape(c.n_instances, c.count(name), c.width).copy()

    def with_group(self, name: str, values: np.ndarray) -> "TokenState":
        c = self.config
        out = self.tokens.copy()
        out[c.group_slice(name)] = np.asarray(values, dtype=float).reshape(-1, c.width)
        return replace(self, tokens=out)


@dataclass(frozen=True)
class PromptSet:
    """Optional prompts per instance slot.

    ``keypoints``: (n, K, 3) rows of (x, y, valid) in normalized coordinates.
    ``masks``: (n, H0, W0) binary grids at feature resolution.
    """

    keypoints: np.ndarray | None = None
    masks: np.ndarray | None = None

    @property
    def has_keypoints(self) -> bool:
        return self.keypoints is not None

    @property
    def has_masks(self) -> bool:
        return self.masks is not None


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    n_heads: int = 1

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1] // self.n_heads


@dataclass(frozen=True, eq=False)
class FeedbackWeights:
    phi_pos: np.ndarray  # (2, D)
    phi_feat: np.ndarray  # (C0, D)
    psi_pos: np.ndarray  # (3, D)


@dataclass(frozen=True, eq=False)
class DecoderWeights:
    query_init: np.ndarray  # (N, D)
    self_attn: AttentionWeights
    cross_attn: AttentionWeights
    feedback: FeedbackWeights
    kp_prompt_encoder: np.ndarray  # (3K, (n_prompt - 1) * D)
    mask_prompt_encoder: np.ndarray  # (H0 W0, D)
    kp_placeholder: np.ndarray  # (n_prompt - 1, D)
    mask_placeholder: np.ndarray  # (D,)
    kp2d_head: np.ndarray  # (D, 2) per-token feedback predictions
    kp3d_head: np.ndarray  # (D, 3)
    params_head: np.ndarray  # (D, n_params)
    box_head: np.ndarray  # (D, 5) box + confidence logit
    out_kp2d_head: np.ndarray  # (D, 2K_out)
    out_kp3d_head: np.ndarray  # (D, 3K_out)
    config: DecoderConfig = field(default_factory=DecoderConfig)


@dataclass(frozen=True, eq=False)
class DecoderOutput:
    params: np.ndarray  # (P, n_params)
    bbox: np.ndarray  # (P, 4) normalized cx, cy, w, h
    confidence: np.ndarray  # (P,)
    keypoints2d: np.ndarray  # (P, K_out, 2) normalized
    keypoints3d: np.ndarray  # (P, K_out, 3)
    final_tokens: TokenState
    attention: list[np.ndarray] = field(default_factory=list, repr=False)

    def split_params(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self.final_tokens.config
        v = self.params[i]
        return v[: c.n_betas], v[c.n_betas: c.n_betas + 3 * c.n_joints].reshape(-1, 3), v[-3:]


# ---------------------------------------------------------------------------
# weights


def init_weights(config: DecoderConfig, rng: np.random.Generator) -> DecoderWeights:
    D = config.width
    H0, W0, C0 = config.grid
    n_kp_tok = config.count("prompt") - 1
    Kp = config.n_prompt_keypoints
    f64 = np.float64

    def lin(fan_in, fan_out, gain=1.0):
        return (rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))).astype(f64)

    return DecoderWeights(
        query_init=rng.standard_normal((config.n_tokens, D)),
        self_attn=AttentionWeights(lin(D, D), lin(D, D), lin(D, D), config.n_heads),
        cross_attn=AttentionWeights(lin(2 * D, D), lin(C0, D), lin(C0, D), config.n_heads),
        feedback=FeedbackWeights(lin(2, D), lin(C0, D), lin(3, D)),
        kp_prompt_encoder=lin(3 * Kp, n_kp_tok * D),
        mask_prompt_encoder=lin(H0 * W0, D),
        kp_placeholder=rng.standard_normal((n_kp_tok, D)),
        mask_placeholder=rng.standard_normal(D),
        kp2d_head=lin(D, 2),
        kp3d_head=lin(D, 3),
        params_head=lin(D, config.n_params, 0.1),
        box_head=lin(D, 5),
        out_kp2d_head=lin(D, 2 * config.n_out_keypoints),
        out_kp3d_head=lin(D, 3 * config.n_out_keypoints),
        config=config,
    )


_MATRICES = ("query_init", "kp_prompt_encoder", "mask_prompt_encoder", "kp_placeholder", "mask_placeholder",
             "kp2d_head", "kp3d_head", "params_head", "box_head", "out_kp2d_head", "out_kp3d_head")


def save_weights(weights: DecoderWeights, path) -> None:
    arrays = {name: getattr(weights, name) for name in _MATRICES}
    for prefix, att in (("self_attn", weights.self_attn), ("cross_attn", weights.cross_attn)):
        arrays.update({f"{prefix}.W_Q": att.W_Q, f"{prefix}.W_K": att.W_K, f"{prefix}.W_V": att.W_V})
    fb = weights.feedback
    arrays.update({"feedback.phi_pos": fb.phi_pos, "feedback.phi_feat": fb.phi_feat, "feedback.psi_pos": fb.psi_pos})
    header = json.dumps({"schema_version": WEIGHTS_SCHEMA_VERSION, "config": asdict(weights.config)})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(header), **arrays)


def load_weights(path) -> DecoderWeights:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: np.array(data[k]) for k in data.files}
    try:
        header = json.loads(str(arrays.pop("header")))
        if header["schema_version"] != WEIGHTS_SCHEMA_VERSION:
            raise ValueError(f"unsupported weights schema_version {header['schema_version']}")
        cfg = header["config"]
        cfg["group_sizes"] = tuple(cfg["group_sizes"])
        cfg["grid"] = tuple(cfg["grid"])
        config = DecoderConfig(**cfg)
        weights = DecoderWeights(
            self_attn=AttentionWeights(arrays["self_attn.W_Q"], arrays["self_attn.W_K"], arrays["self_attn.W_V"],
                                       config.n_heads),
            cross_attn=AttentionWeights(arrays["cross_attn.W_Q"], arrays["cross_attn.W_K"], arrays["cross_attn.W_V"],
                                        config.n_heads),
            feedback=FeedbackWeights(arrays["feedback.phi_pos"], arrays["feedback.phi_feat"],
                                     arrays["feedback.psi_pos"]),
            config=config,
            **{name: arrays[name] for name in _MATRICES},
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing weight {exc}") from exc
    check_weights(weights)
    return weights


def check_weights(w: DecoderWeights) -> None:
    c = w.config
    D, (H0, W0, C0) = c.width, c.grid
    n_kp_tok = c.count("prompt") - 1
    expected = {
        "query_init": (c.n_tokens, D),
        "kp_prompt_encoder": (3 * c.n_prompt_keypoints, n_kp_tok * D),
        "mask_prompt_encoder": (H0 * W0, D),
        "kp_placeholder": (n_kp_tok, D),
        "mask_placeholder": (D,),
        "kp2d_head": (D, 2),
        "kp3d_head": (D, 3),
        "params_head": (D, c.n_params),
        "box_head": (D, 5),
        "out_kp2d_head": (D, 2 * c.n_out_keypoints),
        "out_kp3d_head": (D, 3 * c.n_out_keypoints),
    }
    for name, shape in expected.items():
        if getattr(w, name).shape != shape:
            raise ValueError(f"weight {name} has shape {getattr(w, name).shape}, expected {shape}")
    for name, att, q_in, kv_in in (("self_attn", w.self_attn, D, D), ("cross_attn", w.cross_attn, 2 * D, C0)):
        if att.W_Q.shape != (q_in, D) or att.W_K.shape != (kv_in, D) or att.W_V.shape != (kv_in, D):
            raise ValueError(f"{name} projections inconsistent with width {D}")
    fb = w.feedback
    if fb.phi_pos.shape != (2, D) or fb.phi_feat.shape != (C0, D) or fb.psi_pos.shape != (3, D):
        raise ValueError("feedback projections inconsistent with width/channels")


# ---------------------------------------------------------------------------
# encoder stub


def _positional_encoding(H0: int, W0: int, C0: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(H0) + 0.5) / H0, (np.arange(W0) + 0.5) / W0, indexing="ij")
    n_freq = max(C0 // 4, 1)
    freqs = 2.0 ** np.linspace(0, 6, n_freq) * np.pi
    parts = [np.sin(xs[..., None] * freqs), np.cos(xs[..., None] * freqs),
             np.sin(ys[..., None] * freqs), np.cos(ys[..., None] * freqs)]
    pe = np.concatenate(parts, axis=-1)
    out = np.zeros((H0, W0, C0))
    out[..., : min(C0, pe.shape[-1])] = pe[..., :C0]
    return out


def stub_encode(image: np.ndarray, config: DecoderConfig) -> ImageFeatureMap:
    """Patch features: 4x4 average pooling inside each patch, then a fixed projection to C0."""
    img = np.asarray(image, dtype=float)
    H0, W0, C0 = config.grid
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be H x W x 3")
    H, W = img.shape[:2]
    if H % H0 or W % W0:
        raise ValueError(f"image {H}x{W} not divisible into a {H0}x{W0} patch grid")
    ph, pw = H // H0, W // W0
    s = int(np.gcd(np.gcd(ph, pw), 4))
    blocks = img.reshape(H0, s, ph // s, W0, s, pw // s, 3).mean(axis=(2, 5))  # (H0, s, W0, s, 3)
    content = blocks.transpose(0, 2, 1, 3, 4).reshape(H0, W0, s * s * 3)
    proj = np.random.default_rng(ENCODER_SEED).standard_normal((s * s * 3, C0)) / np.sqrt(s * s * 3)
    return ImageFeatureMap(grid=content @ proj, positional=_positional_encoding(H0, W0, C0))


# ---------------------------------------------------------------------------
# attention


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attend(queries: np.ndarray, keys_in: np.ndarray, values_in: np.ndarray, w: AttentionWeights):
    """softmax((Q W_Q)(K W_K)^T / sqrt(d_k)) (V W_V), per head; returns (out, probs[h, n_q, n_k])."""
    q = queries @ w.W_Q
    k = keys_in @ w.W_K
    v = values_in @ w.W_V
    h, dk = w.n_heads, w.d_k
    q = q.reshape(len(q), h, dk).transpose(1, 0, 2)
    k = k.reshape(len(k), h, -1).transpose(1, 0, 2)
    v = v.reshape(len(v), h, -1).transpose(1, 0, 2)
    probs = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dk))
    out = (probs @ v).transpose(1, 0, 2).reshape(queries.shape[0], -1)
    return out, probs


def cross_attention(tokens: TokenState, features: ImageFeatureMap, weights: AttentionWeights,
                    previous: TokenState | None = None) -> tuple[TokenState, np.ndarray]:
    """Next-layer tokens from the current and previous state attending to image features.

    The previous state (zeros at the first layer) is concatenated along the
    feature axis.  Keys see content plus positional encoding, values content only.
    """
    prev = np.zeros_like(tokens.tokens) if previous is None else previous.tokens
    q_cat = np.concatenate([tokens.tokens, prev], axis=1)
    F = features.flat
    out, probs = attend(q_cat, F + features.flat_positional, F, weights)
    return TokenState(out, tokens.config, tokens.layer + 1), probs


def mix_instance_tokens(tokens: TokenState, weights: AttentionWeights) -> TokenState:
    """Residual self-attention among the tokens of each instance slot."""
    c = tokens.config
    P, D = c.n_instances, c.width
    per_slot = np.concatenate([tokens.group(g) for g in GROUPS], axis=1)  # (P, T, D)
    mixed = np.empty_like(per_slot)
    for i in range(P):
        out, _ = attend(per_slot[i], per_slot[i], per_slot[i], weights)
        mixed[i] = per_slot[i] + out
    state = tokens
    start = 0
    for g in GROUPS:
        n = c.count(g)
        state = state.with_group(g, mixed[:, start:start + n].reshape(-1, D))
        start += n
    return state


# ---------------------------------------------------------------------------
# keypoint feedback


def bilinear_sample(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (H0, W0, C) features at normalized (x, y) coords; cell centers sit at (i + 0.5) / n."""
    H0, W0, _ = grid.shape
    xy = np.clip(np.asarray(coords, dtype=float), 0.0, 1.0)
    fx = np.clip(xy[..., 0] * W0 - 0.5, 0.0, W0 - 1.0)
    fy = np.clip(xy[..., 1] * H0 - 0.5, 0.0, H0 - 1.0)
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    x1 = np.minimum(x0 + 1, W0 - 1)
    y1 = np.minimum(y0 + 1, H0 - 1)
    ax = (fx - x0)[..., None]
    ay = (fy - y0)[..., None]
    top = grid[y0, x0] * (1 - ax) + grid[y0, x1] * ax
    bottom = grid[y1, x0] * (1 - ax) + grid[y1, x1] * ax
    return top * (1 - ay) + bottom * ay


def refresh_kp2d_tokens(tokens: TokenState, kp2d: np.ndarray, features: ImageFeatureMap,
                        fb: FeedbackWeights) -> TokenState:
    """kp2d tokens += phi_pos(coords) + phi_feat(features sampled at coords)."""
    coords = np.clip(np.asarray(kp2d, dtype=float), 0.0, 1.0)
    inc = coords @ fb.phi_pos + bilinear_sample(features.grid, coords) @ fb.phi_feat
    return tokens.with_group("kp2d", tokens.group("kp2d") + inc)


def normalize_kp3d(kp3d: np.ndarray) -> np.ndarray:
    kp3d = np.asarray(kp3d, dtype=float)
    return (kp3d - kp3d[..., :1, :]) / KP3D_SCALE


def refresh_kp3d_tokens(tokens: TokenState, kp3d: np.ndarray, fb: FeedbackWeights) -> TokenState:
    """kp3d tokens += psi_pos(root-relative, scaled 3D keypoints)."""
    return tokens.with_group("kp3d", tokens.group("kp3d") + normalize_kp3d(kp3d) @ fb.psi_pos)


# ---------------------------------------------------------------------------
# prompts and decoding


def encode_prompts(config: DecoderConfig, prompts: PromptSet, weights: DecoderWeights) -> np.ndarray:
    """(P, n_prompt, D) prompt tokens: one mask token then the keypoint tokens."""
    P, D = config.n_instances, config.width
    n_kp_tok = config.count("prompt") - 1
    out = np.empty((P, n_kp_tok + 1, D))
    out[:, 0] = weights.mask_placeholder
    out[:, 1:] = weights.kp_placeholder
    if prompts.masks is not None:
        masks = np.asarray(prompts.masks, dtype=float)
        if masks.shape[1:] != config.grid[:2]:
            raise ValueError(f"mask prompts must be {config.grid[:2]} grids")
        n = min(len(masks), P)
        out[:n, 0] = masks[:n].reshape(n, -1) @ weights.mask_prompt_encoder
    if prompts.keypoints is not None:
        kps = np.asarray(prompts.keypoints, dtype=float)
        if kps.shape[1:] != (config.n_prompt_keypoints, 3):
            raise ValueError(f"keypoint prompts must be (n, {config.n_prompt_keypoints}, 3)")
        n = min(len(kps), P)
        # coordinates of masked-out keypoints carry no information
        kps = kps[:n] * (kps[:n, :, 2:3] > 0)
        out[:n, 1:] = (kps.reshape(n, -1) @ weights.kp_prompt_encoder).reshape(n, n_kp_tok, D)
    return out


def assemble_queries(config: DecoderConfig, prompts: PromptSet, weights: DecoderWeights) -> TokenState:
    """Layer-0 token state: initial queries with the prompt group filled from ``prompts``."""
    state = TokenState(weights.query_init.copy(), config, 0)
    return state.with_group("prompt", encode_prompts(config, prompts, weights))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def readout(tokens: TokenState, weights: DecoderWeights) -> dict[str, np.ndarray]:
    c = tokens.config
    params_tok = tokens.group("params").mean(axis=1)
    box_tok = tokens.group("box").mean(axis=1)
    box = box_tok @ weights.box_head
    return dict(
        params=params_tok @ weights.params_head,
        bbox=_sigmoid(box[:, :4]),
        confidence=_sigmoid(box[:, 4]),
        keypoints2d=_sigmoid(params_tok @ weights.out_kp2d_head).reshape(c.n_instances, -1, 2),
        keypoints3d=(params_tok @ weights.out_kp3d_head).reshape(c.n_instances, -1, 3),
    )


def decode(features: ImageFeatureMap, prompts: PromptSet, config: DecoderConfig,
           weights: DecoderWeights, keep_attention: bool = False) -> DecoderOutput:
    tokens = assemble_queries(config, prompts, weights)
    previous = None
    attention = []
    for _ in range(config.n_layers):
        mixed = mix_instance_tokens(tokens, weights.self_attn)
        new, probs = cross_attention(mixed, features, weights.cross_attn, previous)
        if keep_attention:
            attention.append(probs)
        previous = tokens
        kp2d = _sigmoid(new.group("kp2d") @ weights.kp2d_head)
        kp3d = new.group("kp3d") @ weights.kp3d_head
        new = refresh_kp2d_tokens(new, kp2d, features, weights.feedback)
        tokens = refresh_kp3d_tokens(new, kp3d, weights.feedback)
    return DecoderOutput(final_tokens=tokens, attention=attention, **readout(tokens, weights))


def apply_prompt_dropout(prompts: PromptSet, cfg: DropoutConfig, rng: np.random.Generator) -> PromptSet:
    """Training-time prompt dropout: drop masks, whole keypoint prompts, or single keypoints."""
    masks = prompts.masks
    if masks is not None and rng.random() < cfg.p_mask_drop:
        masks = None
    kps = prompts.keypoints
    if kps is not None:
        if rng.random() < cfg.p_kp_prompt_drop:
            kps = None
        else:
            rate = rng.uniform(0.0, cfg.kp_mask_rate_max)
            kps = np.array(kps, dtype=float)
            drop = rng.random(kps.shape[:2]) < rate
            kps[..., 2] = np.where(drop, 0.0, kps[..., 2])
    return PromptSet(keypoints=kps, masks=masks)


def prompts_from_annotations(config: DecoderConfig, keypoints2d_norm, visibility, boxes) -> PromptSet:
    """Keypoint prompts from normalized ground-truth keypoints and box-shaped mask prompts."""
    H0, W0, _ = config.grid
    n = len(keypoints2d_norm)
    kps = np.zeros((n, config.n_prompt_keypoints, 3))
    masks = np.zeros((n, H0, W0))
    cy, cx = (np.arange(H0) + 0.5) / H0, (np.arange(W0) + 0.5) / W0
    for i in range(n):
        kp = np.asarray(keypoints2d_norm[i], dtype=float)
        k = min(len(kp), config.n_prompt_keypoints)
        kps[i, :k, :2] = kp[:k]
        kps[i, :k, 2] = np.asarray(visibility[i], dtype=float)[:k]
        x0, y0, x1, y1 = boxes[i].xyxy()
        masks[i] = ((cy[:, None] >= y0) & (cy[:, None] <= y1) & (cx[None, :] >= x0) & (cx[None, :] <= x1))
    return PromptSet(keypoints=kps, masks=masks)
