"""Trainable point generator.

K learnable queries attend over frozen multi-stage features and emit,
per query, M candidate points (x, y, positive/negative score) plus a
confidence.  Per stage the computation is:

    V', T_n = fuse(V_n, T)          text/vision cross-fusion
    Q      <- attend(Q, V'), then attend(Q, T_n)

All attention blocks are residual single-head pre-norm cross-attention
(layer norm without affine parameters, so zero-initialized projections
make every block an exact identity).  Two-layer MLP heads map final
queries to 3M point numbers and one confidence logit; sigmoids keep
every output inside [0, 1].

Cross-attention over cells is permutation invariant, which means raw
queries cannot say *where* a feature cell sits.  The positional_keys
flag adds fixed sinusoidal encodings to the visual cells right before
the query update, letting attention read out locations; it defaults to
off so the bare fusion stack keeps the set semantics.

Decoded masks come from a bound promptable decoder; the encoder and
decoder are referenced, never trained, and checkpoints carry only the
generator parameters plus config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .decoders import PromptableDecoder, RasterContext
from .encoders import StageFeatures, SyntheticEncoder
from .errors import ValidationError
from .matching import Prediction
from .prompts import PointPrompt
from .world import Expression, SceneSpec

CHECKPOINT_MAGIC = b"PPTCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    n_stages: int = 2
    feat_dim: int = 64
    n_queries: int = 16  # K
    n_points: int = 12  # M
    head_hidden: int | None = None  # defaults to feat_dim
    positional_keys: bool = False
    init_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.n_stages, self.feat_dim, self.n_queries, self.n_points) < 1:
            raise ValidationError("generator dimensions must be positive")
        if self.n_points < 2:
            raise ValidationError("need at least two points per query (one positive, one negative)")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ValidationError("head_hidden must be positive")
        if self.positional_keys and self.feat_dim % 4 != 0:
            raise ValidationError("positional keys need feat_dim divisible by 4")

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.feat_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        return cls(**data)


def _np64(arr: np.ndarray) -> torch.Tensor:
    """Copying conversion; encoder arrays are read-only."""
    return torch.from_numpy(np.array(arr, dtype=np.float64))


def _ln(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.layer_norm(x, (x.shape[-1],))


class CrossAttention(nn.Module):
    """Residual pre-norm single-head cross-attention, x attending to y."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self._scale = 1.0 / np.sqrt(dim)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        xn = _ln(x)
        yn = _ln(y)
        attn = torch.softmax(self.q(xn) @ self.k(yn).T * self._scale, dim=-1)
        return x + self.o(attn @ self.v(yn))


def sine_positions(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-d sinusoidal encodings, flattened row-major to (h*w, dim)."""
    if dim % 4 != 0:
        raise ValidationError("sinusoidal encoding needs dim divisible by 4")
    quarter = dim // 4
    freqs = torch.exp(-np.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    ys = (torch.arange(h, dtype=torch.float64) / max(h, 1))[:, None] * (2.0 * np.pi)
    xs = (torch.arange(w, dtype=torch.float64) / max(w, 1))[:, None] * (2.0 * np.pi)
    y_enc = torch.cat([torch.sin(ys * freqs), torch.cos(ys * freqs)], dim=1)  # (h, dim/2)
    x_enc = torch.cat([torch.sin(xs * freqs), torch.cos(xs * freqs)], dim=1)  # (w, dim/2)
    grid = torch.cat(
        [
            y_enc[:, None, :].expand(h, w, dim // 2),
            x_enc[None, :, :].expand(h, w, dim // 2),
        ],
        dim=2,
    )
    return grid.reshape(h * w, dim)


class PointGenerator(nn.Module):
    """Query-based point prompt generator over frozen features."""

    def __init__(
        self,
        config: GeneratorConfig | None = None,
        encoder: SyntheticEncoder | None = None,
        decoder: PromptableDecoder | None = None,
        init_seed: int = 0,
    ) -> None:
        super().__init__()
        self.config = config or GeneratorConfig()
        c = self.config
        self.encoder = encoder
        self.decoder = decoder

        self.queries = nn.Parameter(torch.zeros(c.n_queries, c.feat_dim))
        self.fuse_visual = nn.ModuleList(CrossAttention(c.feat_dim) for _ in range(c.n_stages))
        self.fuse_text = nn.ModuleList(CrossAttention(c.feat_dim) for _ in range(c.n_stages))
        self.query_visual = nn.ModuleList(CrossAttention(c.feat_dim) for _ in range(c.n_stages))
        self.query_text = nn.ModuleList(CrossAttention(c.feat_dim) for _ in range(c.n_stages))
        self.point_head = nn.Sequential(
            nn.Linear(c.feat_dim, c.hidden), nn.ReLU(), nn.Linear(c.hidden, 3 * c.n_points)
        )
        self.score_head = nn.Sequential(
            nn.Linear(c.feat_dim, c.hidden), nn.ReLU(), nn.Linear(c.hidden, 1)
        )
        self.double()
        self.reset_parameters(init_seed)

    def reset_parameters(self, seed: int) -> None:
        """Deterministic initialization from the seed."""
        gen = torch.Generator().manual_seed(seed)
        scale = self.config.init_scale
        with torch.no_grad():
            self.queries.normal_(0.0, 1.0, generator=gen)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    fan_in = module.weight.shape[1]
                    module.weight.normal_(0.0, scale / np.sqrt(fan_in), generator=gen)
                    module.bias.zero_()

    def bind(self, encoder: SyntheticEncoder | None, decoder: PromptableDecoder | None) -> "PointGenerator":
        self.encoder = encoder
        self.decoder = decoder
        return self

    # -- stage computation -------------------------------------------------

    def fuse_stage(self, stage: int, visual: torch.Tensor, text: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Cross-fuse one stage: V' = V + attn(V -> T), T_n = T + attn(T -> V)."""
        fused_visual = self.fuse_visual[stage](visual, text)
        fused_text = self.fuse_text[stage](text, visual)
        return fused_visual, fused_text

    def update_queries(
        self,
        stage: int,
        queries: torch.Tensor,
        fused_visual: torch.Tensor,
        fused_text: torch.Tensor,
        grid_shape: tuple[int, int] | None = None,
    ) -> torch.Tensor:
        """Attend queries over fused visual cells, then fused text tokens."""
        keys = fused_visual
        if self.config.positional_keys:
            if grid_shape is None:
                raise ValidationError("positional keys need the stage grid shape")
            h, w = grid_shape
            if h * w != fused_visual.shape[0]:
                raise ValidationError(f"grid {grid_shape} does not fit {fused_visual.shape[0]} cells")
            keys = fused_visual + sine_positions(h, w, self.config.feat_dim)
        queries = self.query_visual[stage](queries, keys)
        queries = self.query_text[stage](queries, fused_text)
        return queries

    def predict_heads(self, queries: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Map final queries to (xy, point labels, confidence), all in [0, 1]."""
        k = queries.shape[0]
        raw = self.point_head(queries).reshape(k, self.config.n_points, 3)
        packed = torch.sigmoid(raw)
        xy = packed[:, :, :2]
        point_labels = packed[:, :, 2]
        confidence = torch.sigmoid(self.score_head(queries))[:, 0]
        return xy, point_labels, confidence

    def forward_features(self, features: StageFeatures) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Differentiable core: frozen features in, point tensors out."""
        c = self.config
        if features.n_stages != c.n_stages:
            raise ValidationError(
                f"feature stages {features.n_stages} do not match generator stages {c.n_stages}"
            )
        if features.feat_dim != c.feat_dim:
            raise ValidationError(
                f"feature width {features.feat_dim} does not match generator width {c.feat_dim}"
            )
        text = _np64(features.text)
        queries = self.queries
        for n in range(c.n_stages):
            grid = features.grid_shape(n)
            visual = _np64(features.stages[n]).reshape(grid[0] * grid[1], c.feat_dim)
            fused_visual, fused_text = self.fuse_stage(n, visual, text)
            queries = self.update_queries(n, queries, fused_visual, fused_text, grid_shape=grid)
        xy, point_labels, confidence = self.predict_heads(queries)
        if not bool(
            ((xy >= 0) & (xy <= 1)).all()
            and ((point_labels >= 0) & (point_labels <= 1)).all()
            and ((confidence >= 0) & (confidence <= 1)).all()
        ):
            raise RuntimeError("generator outputs escaped [0, 1]; head squashing is broken")
        return xy, point_labels, confidence

    def forward(
        self,
        scene: SceneSpec,
        expression: Expression | list[str] | tuple[str, ...],
        features: StageFeatures | None = None,
        context: RasterContext | None = None,
        threshold: float = 0.5,
    ) -> list[Prediction]:
        """Full pipeline for one sample: K predictions with decoded masks.

        features/context may be passed in to reuse cached work; they must
        belong to the same scene and expression.
        """
        if self.encoder is None or self.decoder is None:
            raise ValidationError("generator needs encoder and decoder bound before forward")
        if features is None:
            features = self.encoder.extract_features(scene, expression)
        if context is None:
            context = self.decoder.make_context(scene)
        xy, point_labels, confidence = self.forward_features(features)
        preds = []
        for k in range(self.config.n_queries):
            prompt = PointPrompt(
                xy=xy[k].detach().cpu().numpy(),
                labels=point_labels[k].detach().cpu().numpy(),
            )
            mask = self.decoder.segment_from_points(context, prompt, threshold=threshold)
            preds.append(
                Prediction(
                    mask=mask,
                    xy_t=xy[k],
                    point_labels_t=point_labels[k],
                    confidence_t=confidence[k],
                )
            )
        return preds

    def parameter_vector(self) -> np.ndarray:
        """All parameters flattened in named order (diagnostics, tests)."""
        return np.concatenate(
            [p.detach().cpu().numpy().ravel() for _, p in sorted(self.named_parameters())]
        )


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON
# header, then raw float64 little-endian parameter buffers concatenated
# in header order.  Bitwise-stable for identical parameters.


def save_checkpoint(generator: PointGenerator, path: str, extra: dict | None = None) -> None:
    tensors = []
    buffers = []
    for name, param in generator.named_parameters():
        arr = param.detach().cpu().numpy().astype("<f8")
        tensors.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": generator.config.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(
    path: str,
    encoder: SyntheticEncoder | None = None,
    decoder: PromptableDecoder | None = None,
) -> tuple[PointGenerator, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"not a generator checkpoint: bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {header.get('format_version')}")
        config = GeneratorConfig.from_dict(header["config"])
        generator = PointGenerator(config, encoder=encoder, decoder=decoder)
        params = dict(generator.named_parameters())
        if set(params) != {t["name"] for t in header["tensors"]}:
            raise ValidationError("checkpoint parameter names do not match the architecture")
        with torch.no_grad():
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                param = params[entry["name"]]
                if tuple(param.shape) != shape:
                    raise ValidationError(
                        f"parameter {entry['name']} has shape {tuple(param.shape)}, checkpoint says {shape}"
                    )
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise ValidationError("checkpoint truncated")
                param.copy_(torch.from_numpy(np.frombuffer(raw, dtype="<f8").reshape(shape).copy()))
        trailing = fh.read(1)
        if trailing:
            raise ValidationError("checkpoint has trailing bytes")
    return generator, header.get("extra", {})
