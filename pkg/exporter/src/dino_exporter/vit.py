"""Minimal ViT-S forward pass that exposes last-layer keys and attention.

Runs checkpoints in the standard self-distilled ViT layout
(patch_embed.proj, blocks.N.{norm1,attn.qkv,attn.proj,norm2,mlp.fc1,mlp.fc2},
cls_token, pos_embed, norm).  Only the pieces the exporter needs are
implemented: a float32 CPU/GPU forward, the per-head key vectors of the
last block, and the CLS-to-patch attention averaged over heads.
"""

import math
import os

import numpy as np

from .errors import ModelLoadFailure

HEADS = {"vits16": 6, "vits8": 6}
WEIGHTS_ENV = "DVK_EXPORT_WEIGHTS"

_REQUIRED = (
    "cls_token",
    "pos_embed",
    "patch_embed.proj.weight",
    "patch_embed.proj.bias",
    "norm.weight",
    "norm.bias",
)


def _torch():
    try:
        import torch
    except ImportError as exc:
        raise ModelLoadFailure("torch is not installed; pip install torch") from exc
    return torch


def _unwrap(state):
    for key in ("state_dict", "model", "teacher", "student"):
        if isinstance(state, dict) and key in state and isinstance(state[key], dict):
            state = state[key]
    out = {}
    for name, value in state.items():
        for prefix in ("module.", "backbone."):
            if name.startswith(prefix):
                name = name[len(prefix):]
        out[name] = value
    return out


class VitBackend:
    """Loads a checkpoint once and exports (keys, attention, cls) per image."""

    def __init__(self, model: str, patch: int, weights: str | None, device: str = "cpu"):
        torch = _torch()
        path = weights or os.environ.get(WEIGHTS_ENV)
        if not path:
            raise ModelLoadFailure(
                f"no weights for {model}: pass --weights or set {WEIGHTS_ENV}"
            )
        if not os.path.exists(path):
            raise ModelLoadFailure(f"weights file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ModelLoadFailure(f"cannot load {path}: {exc}") from exc
        state = _unwrap(state)
        missing = [k for k in _REQUIRED if k not in state]
        if missing:
            raise ModelLoadFailure(f"{path}: missing tensors {missing}")
        self.depth = 0
        while f"blocks.{self.depth}.attn.qkv.weight" in state:
            self.depth += 1
        if self.depth == 0:
            raise ModelLoadFailure(f"{path}: no transformer blocks found")
        pw = state["patch_embed.proj.weight"]
        if pw.ndim != 4 or pw.shape[2] != patch or pw.shape[3] != patch:
            raise ModelLoadFailure(
                f"{path}: patch embedding is {tuple(pw.shape)}, expected patch {patch}"
            )
        self.embed_dim = int(pw.shape[0])
        self.heads = HEADS.get(model, 6)
        if self.embed_dim % self.heads:
            raise ModelLoadFailure(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        self.patch = patch
        self.device = torch.device(device)
        self.state = {
            k: v.to(self.device, dtype=torch.float32) for k, v in state.items()
        }

    def _pos_embed(self, side: int):
        torch = _torch()
        pe = self.state["pos_embed"]  # (1, 1 + s0*s0, D)
        n = pe.shape[1] - 1
        s0 = int(math.isqrt(n))
        if s0 * s0 != n:
            raise ModelLoadFailure(f"positional table length {n} is not square")
        if s0 == side:
            return pe
        grid = pe[:, 1:].reshape(1, s0, s0, -1).permute(0, 3, 1, 2)
        grid = torch.nn.functional.interpolate(
            grid, size=(side, side), mode="bicubic", align_corners=False
        )
        grid = grid.permute(0, 2, 3, 1).reshape(1, side * side, -1)
        return torch.cat([pe[:, :1], grid], dim=1)

    def features(self, image: np.ndarray):
        """image: (S, S, 3) float32 in [0,1] ->
        (keys (g,g,heads*head_dim), raw attention (g,g), cls (D,))."""
        torch = _torch()
        s = self.state
        side = image.shape[0] // self.patch
        with torch.inference_mode():
            x = torch.from_numpy(np.ascontiguousarray(image)).to(self.device)
            x = x.permute(2, 0, 1).unsqueeze(0)  # (1, 3, S, S)
            x = torch.nn.functional.conv2d(
                x, s["patch_embed.proj.weight"], s["patch_embed.proj.bias"],
                stride=self.patch,
            )
            x = x.flatten(2).transpose(1, 2)  # (1, g*g, D)
            x = torch.cat([s["cls_token"], x], dim=1) + self._pos_embed(side)
            keys = attn_cls = None
            for i in range(self.depth):
                p = f"blocks.{i}."
                h = torch.nn.functional.layer_norm(
                    x, (self.embed_dim,), s[p + "norm1.weight"], s[p + "norm1.bias"]
                )
                qkv = h @ s[p + "attn.qkv.weight"].T + s[p + "attn.qkv.bias"]
                n = qkv.shape[1]
                head_dim = self.embed_dim // self.heads
                qkv = qkv.reshape(1, n, 3, self.heads, head_dim).permute(2, 0, 3, 1, 4)
                q, k, v = qkv[0], qkv[1], qkv[2]  # (1, heads, n, head_dim)
                attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
                if i == self.depth - 1:
                    # per-head keys of patch tokens, heads concatenated
                    keys = k[0, :, 1:, :].permute(1, 0, 2).reshape(n - 1, -1)
                    attn_cls = attn[0, :, 0, 1:].mean(dim=0)  # CLS -> patches
                out = (attn @ v).transpose(1, 2).reshape(1, n, self.embed_dim)
                x = x + out @ s[p + "attn.proj.weight"].T + s[p + "attn.proj.bias"]
                h2 = torch.nn.functional.layer_norm(
                    x, (self.embed_dim,), s[p + "norm2.weight"], s[p + "norm2.bias"]
                )
                h2 = torch.nn.functional.gelu(h2 @ s[p + "mlp.fc1.weight"].T + s[p + "mlp.fc1.bias"])
                x = x + h2 @ s[p + "mlp.fc2.weight"].T + s[p + "mlp.fc2.bias"]
            x = torch.nn.functional.layer_norm(
                x, (self.embed_dim,), s["norm.weight"], s["norm.bias"]
            )
            emb = keys.reshape(side, side, -1).cpu().numpy().astype(np.float32)
            att = attn_cls.reshape(side, side).cpu().numpy().astype(np.float32)
            cls = x[0, 0].cpu().numpy().astype(np.float32)
        return emb, att, cls
