"""Toy transformer detector: conv backbone, encoder-decoder over learned
object queries, and three prediction heads.

Heads follow the reference family convention: the box and embedding
heads are MLPs with two hidden layers and ReLU, the category head is a
single affine layer. Box outputs are sigmoid-squashed center-format
fractions. Standard (non-deformable) attention with sinusoidal 2-D
positional encodings; no auxiliary per-layer decoding losses.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class DetectorConfig:
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    n_queries: int = 16
    emb_dim: int = 512
    n_classes: int = 2          # object + background during pretraining
    head_hidden: int = 256
    ffn_dim: int | None = None  # default 4 * d_model
    dropout: float = 0.0
    backbone_frozen: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_model % 8 != 0:
            raise ConfigError("d_model must be divisible by 8 (backbone group norm)")
        if self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2 (one class plus background)")
        if min(self.enc_layers, self.dec_layers, self.emb_dim, self.head_hidden) < 1:
            raise ConfigError("layer counts and head widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


@dataclass
class DetectorOutput:
    """Per-image predictions derived from the decoder query embeddings."""

    query_embeddings: torch.Tensor  # (N, d_model)
    boxes: torch.Tensor             # (N, 4) cxcywh in (0, 1)
    embeddings: torch.Tensor        # (N, emb_dim)
    class_logits: torch.Tensor      # (N, n_classes)


@dataclass
class ParameterSnapshot:
    """Named float32 parameter arrays plus the training step counter."""

    tensors: dict[str, np.ndarray]
    step: int
    config: DetectorConfig


class MLP(nn.Module):
    """Feed-forward head with two hidden ReLU layers."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                nn.Linear(in_dim, hidden),
                nn.Linear(hidden, hidden),
                nn.Linear(hidden, out_dim),
            ]
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class ToyBackbone(nn.Module):
    """Four stride-2 conv blocks down to a d_model feature map (1/16 scale)."""

    def __init__(self, d_model: int):
        super().__init__()
        chans = [max(8, d_model // 4), max(8, d_model // 2), d_model, d_model]
        blocks = []
        prev = 3
        for c in chans:
            blocks += [
                nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(8, c),
                nn.ReLU(inplace=True),
            ]
            prev = c
        self.body = nn.Sequential(*blocks)

    def forward(self, x):
        return self.body(x)


def sine_position_encoding(
    h: int, w: int, d_model: int, device=None, dtype=torch.float32
) -> torch.Tensor:
    """(h*w, d_model) 2-D sinusoidal embedding, half the channels for each axis."""
    half = d_model // 2
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w * 2 * math.pi
    dim_t = torch.arange(half, device=device, dtype=dtype)
    dim_t = 10000.0 ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / half)
    pos_y = ys[:, None] / dim_t
    pos_x = xs[:, None] / dim_t
    pos_y = torch.stack([pos_y[:, 0::2].sin(), pos_y[:, 1::2].cos()], dim=2).flatten(1)
    pos_x = torch.stack([pos_x[:, 0::2].sin(), pos_x[:, 1::2].cos()], dim=2).flatten(1)
    grid = torch.cat(
        [
            pos_y[:, None, :].expand(h, w, half),
            pos_x[None, :, :].expand(h, w, half),
        ],
        dim=2,
    )
    return grid.reshape(h * w, d_model)


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.backbone = ToyBackbone(d)
        self.input_proj = nn.Conv2d(d, d, kernel_size=1)
        enc_layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=config.n_heads,
            dim_feedforward=config.ffn,
            dropout=config.dropout,
            activation="relu",
            batch_first=True,
        )
        dec_layer = nn.TransformerDecoderLayer(
            d_model=d,
            nhead=config.n_heads,
            dim_feedforward=config.ffn,
            dropout=config.dropout,
            activation="relu",
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(enc_layer, config.enc_layers)
        self.decoder = nn.TransformerDecoder(dec_layer, config.dec_layers)
        self.query_embed = nn.Parameter(torch.empty(config.n_queries, d))
        self.f_box = MLP(d, config.head_hidden, 4)
        self.f_emb = MLP(d, config.head_hidden, config.emb_dim)
        self.f_cat = nn.Linear(d, config.n_classes)
        self._init_weights()
        if config.backbone_frozen:
            freeze_backbone(self)

    def _init_weights(self):
        for module in (self.encoder, self.decoder):
            for p in module.parameters():
                if p.dim() > 1:
                    nn.init.trunc_normal_(p, std=0.02)
                else:
                    nn.init.zeros_(p)
            # layer norms keep unit scale
            for m in module.modules():
                if isinstance(m, nn.LayerNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.query_embed, std=0.02)
        # start boxes concentrated near (cx, cy, w, h) = (.5, .5, .2, .2)
        wh_logit = math.log(0.2 / 0.8)
        nn.init.zeros_(self.f_box.layers[-1].bias)
        with torch.no_grad():
            self.f_box.layers[-1].bias[2:] = wh_logit

    def forward(self, images: torch.Tensor) -> list[DetectorOutput]:
        """images: (B, 3, H, W), normalized. Returns one output per image."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        feats = self.input_proj(self.backbone(images))
        b, d, fh, fw = feats.shape
        tokens = feats.flatten(2).transpose(1, 2)  # (B, hw, d)
        pos = sine_position_encoding(fh, fw, d, device=feats.device, dtype=feats.dtype)
        memory = self.encoder(tokens + pos[None])
        queries = self.query_embed[None].expand(b, -1, -1).to(feats.dtype)
        v = self.decoder(queries, memory)  # (B, N, d)
        boxes = torch.sigmoid(self.f_box(v))
        embeddings = self.f_emb(v)
        logits = self.f_cat(v)
        return [
            DetectorOutput(
                query_embeddings=v[i],
                boxes=boxes[i],
                embeddings=embeddings[i],
                class_logits=logits[i],
            )
            for i in range(b)
        ]


def prepare_images(images: np.ndarray | list, dtype=torch.float32) -> torch.Tensor:
    """Stack HxWx3 arrays in [0,1] into a normalized (B, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    tensor = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
    return (tensor - 0.5) / 0.5


def freeze_backbone(model: Detector, frozen: bool = True) -> Detector:
    """Exclude (or re-include) backbone parameters from gradient updates."""
    for p in model.backbone.parameters():
        p.requires_grad_(not frozen)
    model.config = dataclasses.replace(model.config, backbone_frozen=frozen)
    return model


def swap_classifier_head(model: Detector, n_classes_new: int) -> Detector:
    """Replace the category head with a freshly initialized affine layer
    (dataset classes plus background). All other parameters are retained."""
    if n_classes_new < 2:
        raise ConfigError(f"classifier needs >= 2 outputs, got {n_classes_new}")
    ref = model.f_cat.weight
    model.f_cat = nn.Linear(model.config.d_model, n_classes_new).to(ref.dtype)
    model.config = dataclasses.replace(model.config, n_classes=n_classes_new)
    return model


def parameter_snapshot(model: Detector, step: int = 0) -> ParameterSnapshot:
    tensors = {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.state_dict().items()
    }
    return ParameterSnapshot(tensors=tensors, step=step, config=model.config)


def load_snapshot(model: Detector, snap: ParameterSnapshot) -> Detector:
    state = {}
    ref = model.state_dict()
    for name, arr in snap.tensors.items():
        if name not in ref:
            raise ConfigError(f"snapshot tensor {name!r} not in model")
        if tuple(ref[name].shape) != arr.shape:
            raise ConfigError(
                f"snapshot tensor {name!r} shape {arr.shape} != model {tuple(ref[name].shape)}"
            )
        state[name] = torch.from_numpy(arr.copy()).to(ref[name].dtype)
    missing = set(ref) - set(state)
    if missing:
        raise ConfigError(f"snapshot missing tensors: {sorted(missing)[:4]}...")
    model.load_state_dict(state)
    return model
