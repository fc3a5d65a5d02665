"""Frozen text/image feature extraction.

The synthetic encoder stands in for a pretrained vision-language
backbone.  Visual features come from the scene's class raster: one-hot
class maps are average-pooled per stage stride and pushed through a
fixed seeded random projection.  Text features hash each token to a
fixed random vector (plus, optionally, a per-position vector so that
token order is visible downstream, the stand-in for contextual word
embeddings) and project to the shared width d.

Everything is a pure function of (config, inputs): there are no
trainable parameters, nothing mutates, and outputs are bit-identical
across calls.  state_checksum() exists so tests can assert the adapter
stayed frozen across a training step.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .world import Expression, SceneSpec, render_labelmap

_TEXT_POS_STREAM = 7919  # arbitrary fixed tag separating positional rng streams


@dataclass(frozen=True)
class EncoderConfig:
    n_stages: int = 2
    feat_dim: int = 64
    strides: tuple[int, ...] = (4, 8)
    class_vocab_size: int = 16
    token_dim: int = 32
    seed: int = 0
    text_positional: bool = True

    def __post_init__(self) -> None:
        if self.n_stages < 1 or self.feat_dim < 1 or self.token_dim < 1:
            raise ValidationError("encoder dimensions must be positive")
        if len(self.strides) != self.n_stages:
            raise ValidationError(
                f"{self.n_stages} stages need {self.n_stages} strides, got {self.strides}"
            )
        if any(s < 1 for s in self.strides):
            raise ValidationError("strides must be positive")
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))


@dataclass(frozen=True)
class StageFeatures:
    """Multi-stage visual grids plus projected text tokens.

    stages[n] has shape (H_n, W_n, d); text has shape (L, d).
    """

    stages: tuple[np.ndarray, ...]
    text: np.ndarray

    @property
    def feat_dim(self) -> int:
        return self.stages[0].shape[2]

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def grid_shape(self, n: int) -> tuple[int, int]:
        return self.stages[n].shape[0], self.stages[n].shape[1]


def _pool_mean(grid: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool (H, W, C) over stride x stride blocks, partial blocks included."""
    h, w, _ = grid.shape
    row_idx = np.arange(0, h, stride)
    col_idx = np.arange(0, w, stride)
    summed = np.add.reduceat(np.add.reduceat(grid, row_idx, axis=0), col_idx, axis=1)
    row_sizes = np.diff(np.append(row_idx, h))
    col_sizes = np.diff(np.append(col_idx, w))
    counts = np.outer(row_sizes, col_sizes).astype(np.float64)
    return summed / counts[:, :, None]


class SyntheticEncoder:
    """Deterministic frozen encoder over synthetic scenes."""

    def __init__(self, config: EncoderConfig | None = None) -> None:
        self.config = config or EncoderConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        self._visual_proj = tuple(
            rng.standard_normal((c.class_vocab_size + 1, c.feat_dim)) for _ in range(c.n_stages)
        )
        self._text_proj = rng.standard_normal((c.token_dim, c.feat_dim)) / np.sqrt(c.token_dim)
        for m in self._visual_proj:
            m.setflags(write=False)
        self._text_proj.setflags(write=False)

    # -- text -------------------------------------------------------------

    def _token_vector(self, token: str, position: int) -> np.ndarray:
        c = self.config
        tok_rng = np.random.default_rng([c.seed, zlib.crc32(token.encode("utf-8"))])
        vec = tok_rng.standard_normal(c.token_dim)
        if c.text_positional:
            pos_rng = np.random.default_rng([c.seed, _TEXT_POS_STREAM, position])
            vec = vec + pos_rng.standard_normal(c.token_dim)
        return vec

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) == 0:
            raise ValidationError("cannot embed an empty token sequence")
        base = np.stack([self._token_vector(t, i) for i, t in enumerate(tokens)])
        return base @ self._text_proj

    # -- visual -----------------------------------------------------------

    def _class_raster(self, scene: SceneSpec) -> np.ndarray:
        c = self.config
        label = render_labelmap(scene)
        lut = np.zeros(max([0] + [r.id for r in scene.regions]) + 1, dtype=np.int32)
        for r in scene.regions:
            if r.class_id > c.class_vocab_size:
                raise ValidationError(
                    f"scene class {r.class_id} exceeds encoder vocabulary {c.class_vocab_size}"
                )
            lut[r.id] = r.class_id
        return lut[label]

    def extract_features(
        self, scene: SceneSpec, expression: Expression | Sequence[str]
    ) -> StageFeatures:
        """Frozen features for one (scene, expression) pair."""
        c = self.config
        tokens = expression.tokens if isinstance(expression, Expression) else tuple(expression)
        classmap = self._class_raster(scene)
        onehot = np.zeros((scene.height, scene.width, c.class_vocab_size + 1), dtype=np.float64)
        h_idx, w_idx = np.meshgrid(np.arange(scene.height), np.arange(scene.width), indexing="ij")
        onehot[h_idx, w_idx, classmap] = 1.0
        stages = []
        for n in range(c.n_stages):
            pooled = _pool_mean(onehot, c.strides[n])
            feat = pooled @ self._visual_proj[n]
            feat.setflags(write=False)
            stages.append(feat)
        text = self.embed_tokens(tokens)
        text.setflags(write=False)
        return StageFeatures(stages=tuple(stages), text=text)

    # -- freeze accounting --------------------------------------------------

    def state_checksum(self) -> str:
        digest = hashlib.sha256()
        for m in self._visual_proj:
            digest.update(m.tobytes())
        digest.update(self._text_proj.tobytes())
        return digest.hexdigest()
