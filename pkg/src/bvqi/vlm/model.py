"""Contrastive image-text encoder with a ResNet visual tower.

Module and parameter names follow the public CLIP release so that the
official ``RN50.pt`` checkpoint loads without key remapping. The attention
pooling layer is modified to return the outputs of every spatial position
(local features) next to the usual mean-query output (global feature).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ClipConfig:
    embed_dim: int = 1024
    image_resolution: int = 224
    vision_layers: tuple[int, int, int, int] = (3, 4, 6, 3)
    vision_width: int = 64
    vision_heads: int = 32
    context_length: int = 77
    vocab_size: int = 49408
    transformer_width: int = 512
    transformer_heads: int = 8
    transformer_layers: int = 12

    @classmethod
    def rn50(cls) -> "ClipConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "ClipConfig":
        """A few-MB configuration for desk-scale tests; same vocabulary and grid."""
        return cls(
            embed_dim=64,
            vision_layers=(1, 1, 1, 1),
            vision_width=8,
            vision_heads=4,
            transformer_width=32,
            transformer_heads=2,
            transformer_layers=2,
        )

    @property
    def grid_size(self) -> int:
        return self.image_resolution // 32

    @property
    def raw_dim(self) -> int:
        return self.vision_width * 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vision_layers"] = list(self.vision_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClipConfig":
        d = dict(d)
        d["vision_layers"] = tuple(d["vision_layers"])
        return cls(**d)

    @classmethod
    def from_state_dict(cls, sd: dict) -> "ClipConfig":
        """Infer the architecture from an official checkpoint's tensors."""
        layers = tuple(
            len({k.split(".")[2] for k in sd if k.startswith(f"visual.layer{b}.")})
            for b in (1, 2, 3, 4)
        )
        if not all(layers):
            raise ValueError("state dict has no ResNet visual tower")
        vision_width = sd["visual.layer1.0.conv1.weight"].shape[0]
        grid = round((sd["visual.attnpool.positional_embedding"].shape[0] - 1) ** 0.5)
        width = sd["ln_final.weight"].shape[0]
        return cls(
            embed_dim=sd["text_projection"].shape[1],
            image_resolution=grid * 32,
            vision_layers=layers,
            vision_width=vision_width,
            vision_heads=vision_width * 32 // 64,
            context_length=sd["positional_embedding"].shape[0],
            vocab_size=sd["token_embedding.weight"].shape[0],
            transformer_width=width,
            transformer_heads=width // 64,
            transformer_layers=len(
                {k.split(".")[2] for k in sd if k.startswith("transformer.resblocks.")}
            ),
        )


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu2 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu3 = nn.ReLU(inplace=True)
        self.downsample = None
        if stride > 1 or inplanes != planes * self.expansion:
            self.downsample = nn.Sequential(
                OrderedDict(
                    [
                        ("-1", nn.AvgPool2d(stride)),
                        ("0", nn.Conv2d(inplanes, planes * self.expansion, 1, stride=1, bias=False)),
                        ("1", nn.BatchNorm2d(planes * self.expansion)),
                    ]
                )
            )

    def forward(self, x):
        identity = x
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.avgpool(out)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        out = out + identity
        return self.relu3(out)


class AttentionPool2d(nn.Module):
    def __init__(self, spacial_dim: int, embed_dim: int, num_heads: int, output_dim: int):
        super().__init__()
        self.positional_embedding = nn.Parameter(
            torch.randn(spacial_dim**2 + 1, embed_dim) / embed_dim**0.5
        )
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.c_proj = nn.Linear(embed_dim, output_dim)
        self.num_heads = num_heads

    def _tokens(self, raw: torch.Tensor) -> torch.Tensor:
        x = raw.flatten(start_dim=2).permute(2, 0, 1)  # NCHW -> (HW)NC
        x = torch.cat([x.mean(dim=0, keepdim=True), x], dim=0)
        return x + self.positional_embedding[:, None, :].to(x.dtype)

    def _attend(self, query, tokens):
        out, _ = F.multi_head_attention_forward(
            query=query,
            key=tokens,
            value=tokens,
            embed_dim_to_check=tokens.shape[-1],
            num_heads=self.num_heads,
            q_proj_weight=self.q_proj.weight,
            k_proj_weight=self.k_proj.weight,
            v_proj_weight=self.v_proj.weight,
            in_proj_weight=None,
            in_proj_bias=torch.cat([self.q_proj.bias, self.k_proj.bias, self.v_proj.bias]),
            bias_k=None,
            bias_v=None,
            add_zero_attn=False,
            dropout_p=0.0,
            out_proj_weight=self.c_proj.weight,
            out_proj_bias=self.c_proj.bias,
            use_separate_proj_weight=True,
            training=self.training,
            need_weights=False,
        )
        return out

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        """Original pooling: only the mean-feature query, (N, output_dim)."""
        tokens = self._tokens(raw)
        return self._attend(tokens[:1], tokens).squeeze(0)

    def forward_dense(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Every token queries the full set: (global (N, D), local (N, H, W, D))."""
        n, _, h, w = raw.shape
        tokens = self._tokens(raw)
        out = self._attend(tokens, tokens)  # (1 + HW, N, D)
        local = out[1:].permute(1, 0, 2).reshape(n, h, w, -1)
        return out[0], local


class ModifiedResNet(nn.Module):
    def __init__(self, layers, output_dim, heads, input_resolution=224, width=64):
        super().__init__()
        self.input_resolution = input_resolution
        self.conv1 = nn.Conv2d(3, width // 2, kernel_size=3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width // 2)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(width // 2, width // 2, kernel_size=3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width // 2)
        self.relu2 = nn.ReLU(inplace=True)
        self.conv3 = nn.Conv2d(width // 2, width, kernel_size=3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.relu3 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(2)

        self._inplanes = width
        self.layer1 = self._make_layer(width, layers[0])
        self.layer2 = self._make_layer(width * 2, layers[1], stride=2)
        self.layer3 = self._make_layer(width * 4, layers[2], stride=2)
        self.layer4 = self._make_layer(width * 8, layers[3], stride=2)

        embed_dim = width * 32
        self.attnpool = AttentionPool2d(input_resolution // 32, embed_dim, heads, output_dim)

    def _make_layer(self, planes, blocks, stride=1):
        layers = [Bottleneck(self._inplanes, planes, stride)]
        self._inplanes = planes * Bottleneck.expansion
        for _ in range(1, blocks):
            layers.append(Bottleneck(self._inplanes, planes))
        return nn.Sequential(*layers)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-pooling feature grid, (N, 32 * width, H/32, W/32)."""
        x = x.type(self.conv1.weight.dtype)
        x = self.relu1(self.bn1(self.conv1(x)))
        x = self.relu2(self.bn2(self.conv2(x)))
        x = self.relu3(self.bn3(self.conv3(x)))
        x = self.avgpool(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)

    def forward(self, x):
        return self.attnpool(self.trunk(x))


class LayerNorm(nn.LayerNorm):
    def forward(self, x: torch.Tensor):
        orig = x.dtype
        return super().forward(x.type(torch.float32)).type(orig)


class QuickGELU(nn.Module):
    def forward(self, x: torch.Tensor):
        return x * torch.sigmoid(1.702 * x)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, d_model: int, n_head: int, attn_mask: torch.Tensor):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, n_head)
        self.ln_1 = LayerNorm(d_model)
        self.mlp = nn.Sequential(
            OrderedDict(
                [
                    ("c_fc", nn.Linear(d_model, d_model * 4)),
                    ("gelu", QuickGELU()),
                    ("c_proj", nn.Linear(d_model * 4, d_model)),
                ]
            )
        )
        self.ln_2 = LayerNorm(d_model)
        self.register_buffer("attn_mask", attn_mask, persistent=False)

    def forward(self, x):
        y = self.ln_1(x)
        mask = self.attn_mask.to(dtype=x.dtype, device=x.device)
        x = x + self.attn(y, y, y, need_weights=False, attn_mask=mask)[0]
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, attn_mask: torch.Tensor):
        super().__init__()
        self.width = width
        self.layers = layers
        self.resblocks = nn.Sequential(
            *[ResidualAttentionBlock(width, heads, attn_mask) for _ in range(layers)]
        )

    def forward(self, x):
        return self.resblocks(x)


class CLIP(nn.Module):
    def __init__(self, config: ClipConfig):
        super().__init__()
        self.config = config
        self.context_length = config.context_length
        self.visual = ModifiedResNet(
            layers=config.vision_layers,
            output_dim=config.embed_dim,
            heads=config.vision_heads,
            input_resolution=config.image_resolution,
            width=config.vision_width,
        )
        mask = torch.full((config.context_length, config.context_length), float("-inf")).triu_(1)
        self.transformer = Transformer(
            config.transformer_width, config.transformer_layers, config.transformer_heads, mask
        )
        self.vocab_size = config.vocab_size
        self.token_embedding = nn.Embedding(config.vocab_size, config.transformer_width)
        self.positional_embedding = nn.Parameter(
            torch.empty(config.context_length, config.transformer_width)
        )
        self.ln_final = LayerNorm(config.transformer_width)
        self.text_projection = nn.Parameter(torch.empty(config.transformer_width, config.embed_dim))
        self.logit_scale = nn.Parameter(torch.ones([]) * np.log(1 / 0.07))

    def encode_image(self, image):
        return self.visual(image)

    def encode_image_dense(self, image):
        """(global, local, raw) from a single pass through the visual tower."""
        raw = self.visual.trunk(image)
        glob, local = self.visual.attnpool.forward_dense(raw)
        return glob, local, raw

    def encode_token_embeddings(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Run the text tower on precomputed token embeddings ``x`` (B, L, W).

        ``tokens`` only locates the end-of-text position (highest token id).
        """
        x = x + self.positional_embedding.type(x.dtype)
        x = self.transformer(x.permute(1, 0, 2)).permute(1, 0, 2)
        x = self.ln_final(x)
        return x[torch.arange(x.shape[0]), tokens.argmax(dim=-1)] @ self.text_projection

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.encode_token_embeddings(self.token_embedding(tokens), tokens)


def init_weights(model: CLIP, seed: int = 0) -> CLIP:
    """Deterministic random initialisation driven by a numpy generator.

    torch's RNG streams are not guaranteed stable across releases; numpy's
    ``default_rng`` is, which keeps desk-scale golden values reproducible.
    """
    rng = np.random.default_rng(seed)
    sd = model.state_dict()
    for name, t in sd.items():
        if "running_mean" in name or name.endswith("bias"):
            arr = np.zeros(t.shape)
        elif "running_var" in name:
            arr = np.ones(t.shape)
        elif "num_batches_tracked" in name:
            continue
        elif name == "logit_scale":
            arr = np.full(t.shape, np.log(1 / 0.07))
        elif (".bn" in name or "downsample.1" in name or "ln_" in name) and name.endswith("weight"):
            arr = np.ones(t.shape)
        elif name == "token_embedding.weight":
            arr = rng.normal(0.0, 0.02, t.shape)
        elif name == "positional_embedding":
            arr = rng.normal(0.0, 0.01, t.shape)
        elif name == "visual.attnpool.positional_embedding":
            arr = rng.normal(0.0, t.shape[1] ** -0.5, t.shape)
        elif name == "text_projection":
            arr = rng.normal(0.0, t.shape[0] ** -0.5, t.shape)
        elif t.ndim == 4:
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            arr = rng.normal(0.0, (2.0 / fan_in) ** 0.5, t.shape)
        elif t.ndim == 2:
            arr = rng.normal(0.0, t.shape[1] ** -0.5, t.shape)
        else:
            arr = rng.normal(0.0, 0.02, t.shape)
        sd[name] = torch.as_tensor(arr, dtype=t.dtype)
    model.load_state_dict(sd)
    return model
