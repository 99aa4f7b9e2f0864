"""Frozen encoder adapter: text features, global/local frame features and
context-token prompts."""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from .model import CLIP, ClipConfig, init_weights

logger = logging.getLogger(__name__)

# per-channel statistics of the published encoder's preprocessing
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)
CONTEXT_PLACEHOLDER = "X"


class TokenizationError(ValueError):
    pass


@dataclass
class TextFeature:
    vector: np.ndarray
    source_prompt: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if not np.all(np.isfinite(self.vector)) or not np.any(self.vector):
            raise ValueError(f"degenerate text feature for {self.source_prompt!r}")


@dataclass
class FrameFeatures:
    """Encoder outputs for a batch of frames.

    global_: (N, D) mean-query attention output, local: (N, H', W', D)
    per-position outputs, raw: (N, C, H', W') pre-pooling grid.
    """

    global_: np.ndarray
    local: np.ndarray
    raw: np.ndarray | None = None

    def __len__(self):
        return len(self.global_)


def _tokenizer():
    from open_clip.tokenizer import SimpleTokenizer

    return SimpleTokenizer()


class ClipAdapter:
    """Read-only wrapper around a frozen :class:`CLIP` model."""

    def __init__(self, model: CLIP, device: str | torch.device = "cpu", batch_size: int = 16):
        self.model = model.float().eval().to(device)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.device = torch.device(device)
        self.batch_size = batch_size
        self.tokenizer = _tokenizer()
        self._sot = self.tokenizer.encoder["<start_of_text>"]
        self._eot = self.tokenizer.encoder["<end_of_text>"]

    # construction ---------------------------------------------------------

    @classmethod
    def random(cls, config: ClipConfig | None = None, seed: int = 0, **kw) -> "ClipAdapter":
        return cls(init_weights(CLIP(config or ClipConfig.tiny()), seed), **kw)

    @classmethod
    def from_file(cls, path: str | Path, **kw) -> "ClipAdapter":
        """Load either an official TorchScript archive or a saved state dict.

        Files written by :func:`save_weights` carry their config; bare state
        dicts have it inferred from tensor shapes.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"weight file not found: {path}")
        config = None
        try:
            with warnings.catch_warnings():
                # official checkpoints are TorchScript archives; there is no other loader
                warnings.simplefilter("ignore", DeprecationWarning)
                sd = torch.jit.load(str(path), map_location="cpu").state_dict()
        except (RuntimeError, ValueError):
            blob = torch.load(str(path), map_location="cpu", weights_only=True)
            if isinstance(blob, dict) and "state_dict" in blob:
                config = ClipConfig.from_dict(blob["config"])
                sd = blob["state_dict"]
            else:
                sd = blob
        sd = {k: v for k, v in sd.items() if k not in ("input_resolution", "context_length", "vocab_size")}
        config = config or ClipConfig.from_state_dict(sd)
        model = CLIP(config)
        model.load_state_dict({k: v.float() for k, v in sd.items()})
        return cls(model, **kw)

    @property
    def config(self) -> ClipConfig:
        return self.model.config

    @cached_property
    def weights_checksum(self) -> str:
        return weights_checksum(self.model)

    # text -----------------------------------------------------------------

    def tokenize(self, prompt: str) -> torch.Tensor:
        ids = [self._sot] + self.tokenizer.encode(prompt) + [self._eot]
        n = self.model.context_length
        if len(ids) > n:
            raise TokenizationError(f"prompt needs {len(ids)} tokens, context length is {n}")
        out = torch.zeros(n, dtype=torch.long)
        out[: len(ids)] = torch.tensor(ids)
        return out

    @torch.no_grad()
    def encode_text(self, prompt: str) -> TextFeature:
        tokens = self.tokenize(prompt)[None].to(self.device)
        vec = self.model.encode_text(tokens)[0]
        return TextFeature(vec.cpu().numpy(), prompt)

    def placeholder_embedding(self, length: int = 1) -> torch.Tensor:
        """Token embedding of the literal placeholder, repeated ``length`` times."""
        ids = self.tokenizer.encode(CONTEXT_PLACEHOLDER)
        if len(ids) != 1:
            raise TokenizationError("placeholder must be a single token")
        emb = self.model.token_embedding.weight[ids[0]].detach().clone()
        return emb.repeat(length, 1)

    def context_tokens(self, description: str, length: int = 1) -> tuple[torch.Tensor, slice]:
        """Token ids of ``a X..X <description> photo`` and the slice holding the Xs."""
        from ..saqi import build_prompt

        prompt = build_prompt(" ".join([CONTEXT_PLACEHOLDER] * length + [description]))
        tokens = self.tokenize(prompt)
        # [SOT, "a", X * length, ...]
        return tokens, slice(2, 2 + length)

    def encode_text_with_context(self, context: torch.Tensor, description: str) -> torch.Tensor:
        """Differentiable text feature for ``"a " + [context] + description + " photo"``.

        ``context`` is (L, token_dim) and is spliced in at embedding level;
        gradients reach only ``context``.
        """
        context = context.reshape(-1, self.model.token_embedding.embedding_dim)
        tokens, where = self.context_tokens(description, len(context))
        tokens = tokens[None].to(self.device)
        emb = self.model.token_embedding(tokens)
        emb = torch.cat([emb[:, : where.start], context[None].to(emb), emb[:, where.stop :]], dim=1)
        return self.model.encode_token_embeddings(emb, tokens)[0]

    # images ---------------------------------------------------------------

    def preprocess(self, frames: np.ndarray) -> torch.Tensor:
        """(N, H, W, 3) floats in [0, 1] -> normalised NCHW tensor."""
        size = self.config.image_resolution
        if frames.ndim != 4 or frames.shape[1:] != (size, size, 3):
            raise ValueError(f"expected (N, {size}, {size}, 3) frames, got {frames.shape}")
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 3, 1, 2)
        mean = torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(PIXEL_STD).view(1, 3, 1, 1)
        return ((x - mean) / std).to(self.device)

    @torch.no_grad()
    def encode_frames(self, frames: np.ndarray, keep_raw: bool = True) -> FrameFeatures:
        x = self.preprocess(frames)
        glob, local, raw = [], [], []
        for start in range(0, len(x), self.batch_size):
            g, l, r = self.model.encode_image_dense(x[start : start + self.batch_size])
            glob.append(g.cpu().numpy())
            local.append(l.cpu().numpy())
            if keep_raw:
                raw.append(r.cpu().numpy())
        return FrameFeatures(
            np.concatenate(glob), np.concatenate(local), np.concatenate(raw) if keep_raw else None
        )

    def encode_frame(self, frame: np.ndarray) -> FrameFeatures:
        return self.encode_frames(frame[None])

    @torch.no_grad()
    def pool_global(self, raw: np.ndarray) -> np.ndarray:
        """Stock attention pooling (mean-feature query only) applied to a raw grid."""
        return self.model.visual.attnpool(torch.from_numpy(raw).to(self.device)).cpu().numpy()


def weights_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_weights(model: CLIP, path: str | Path) -> Path:
    path = Path(path)
    torch.save({"config": model.config.to_dict(), "state_dict": model.state_dict()}, str(path))
    return path


def make_tiny_weights(path: str | Path, seed: int = 0) -> Path:
    """Write a deterministic few-MB random-weight checkpoint (desk-scale runs)."""
    return save_weights(init_weights(CLIP(ClipConfig.tiny()), seed), path)
