"""The assembled tracker, its parameter groups, and the checkpoint format.

Checkpoint format (``EMOE1``): an uncompressed ``.npz`` zip archive with

* ``__magic__``   unicode scalar ``"EMOE1"``
* ``__version__`` int scalar, currently 1
* ``__config__``  unicode scalar, JSON of the full RunConfig
* ``__groups__``  unicode scalar, JSON ``{group: {"trainable": bool, "checksum": hex}}``
* ``<group>/<tensor name>`` one float array per parameter and buffer
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import (CenterHead, Encoder, HeadOutput, PatchEmbed, SegmentLayout,
                       fuse_search_mean, grid_side)
from .config import RunConfig
from .crm import CRM, FusedTokens
from .emoe import Emoe
from .errors import ConfigError, DataError

MAGIC = "EMOE1"
FORMAT_VERSION = 1
GROUPS = ("patch_embed", "encoder", "head", "emoe", "crm")


@dataclass
class ParameterGroup:
    name: str
    trainable: bool
    checksum: str
    num_params: int


@dataclass
class ModelOutput:
    head: HeadOutput
    tokens: torch.Tensor                 # final (B, N, D) tokens
    scores: list                         # per injected layer, (B, K)
    fused: FusedTokens | None = None


class EMoETracker(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m, d = cfg.model, cfg.data
        seed = m.init_seed
        # each group draws from its own seed so toggling eMoE/CRM leaves the backbone untouched
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = PatchEmbed(m.dim, m.patch, d.template_size, d.search_size)
            self.encoder = Encoder(m.dim, m.depth, m.heads, m.mlp_ratio, cfg.injected_layers)
            self.layout = SegmentLayout(self.patch_embed.n_z, self.patch_embed.n_x)
            self.grid = grid_side(self.layout.n_x)
            self.head = CenterHead(m.dim, m.head_channels, self.grid)
            self.emoe = None
            self.crm = None
            if cfg.emoe.enabled:
                torch.manual_seed(seed + 1)
                self.emoe = Emoe(m.dim, cfg.emoe.num_experts, cfg.injected_layers, cfg.emoe.hidden_ratio)
            if cfg.crm.enabled:
                torch.manual_seed(seed + 2)
                self.crm = CRM(m.dim, cfg.crm.tau)
        self.zero_injections = False
        self.apply_freeze()

    # ------------------------------------------------------------------ groups

    def group_modules(self):
        mods = {"patch_embed": self.patch_embed, "encoder": self.encoder, "head": self.head}
        if self.emoe is not None:
            mods["emoe"] = self.emoe
        if self.crm is not None:
            mods["crm"] = self.crm
        return mods

    def trainable_flags(self):
        flags = {"patch_embed": False, "encoder": False, "head": self.cfg.model.header_unfrozen}
        if self.emoe is not None:
            flags["emoe"] = True
        if self.crm is not None:
            flags["crm"] = True
        return flags

    def apply_freeze(self):
        flags = self.trainable_flags()
        for name, mod in self.group_modules().items():
            for p in mod.parameters():
                p.requires_grad_(flags[name])

    def freeze_report(self) -> list[ParameterGroup]:
        flags = self.trainable_flags()
        out = []
        for name, mod in self.group_modules().items():
            params = list(mod.parameters())
            out.append(ParameterGroup(name, flags[name], module_checksum(mod),
                                      sum(p.numel() for p in params)))
        return out

    def checksums(self) -> dict:
        return {g.name: g.checksum for g in self.freeze_report()}

    # ------------------------------------------------------------------ forward

    def embed(self, rgb_z, rgb_x, ev_z, ev_x):
        zr, ze = self.patch_embed(rgb_z, ev_z, "template")
        xr, xe = self.patch_embed(rgb_x, ev_x, "search")
        return torch.cat([zr, xr, ze, xe], dim=1)

    def forward(self, rgb_z, rgb_x, ev_z, ev_x, pos_mask=None) -> ModelOutput:
        """Inputs are channel-first (B, C, H, W) tensors.

        With ``pos_mask`` (B, N_x) the CRM branch also returns its fused tokens.
        """
        x0 = self.embed(rgb_z, rgb_x, ev_z, ev_x)
        injector = None
        if self.emoe is not None:
            self.emoe.reset()
            if self.zero_injections:
                injector = _zero_injector(self.emoe)
            else:
                injector = self.emoe.inject
        xL = self.encoder(x0, injector)
        scores = self.emoe.collect_scores() if self.emoe is not None else []
        fused = None
        if self.crm is not None and (self.cfg.crm.feeds_head or pos_mask is not None):
            fused = self.crm.fuse(xL, self.layout)
        if self.crm is not None and self.cfg.crm.feeds_head:
            search = fused.x
        else:
            search = fuse_search_mean(xL, self.layout)
        return ModelOutput(self.head(search), xL, scores, fused)

    def set_attention_capture(self, on: bool):
        for layer in self.encoder.layers:
            layer.attn.keep_weights = on
            layer.attn.last_weights = None


def _zero_injector(emoe):
    def inject(l, x):
        emoe.inject(l, x)
        return torch.zeros_like(x)
    return inject


def module_checksum(mod: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in mod.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------- checkpoints

def save_checkpoint(model: EMoETracker, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "__magic__": np.array(MAGIC),
        "__version__": np.array(FORMAT_VERSION),
        "__config__": np.array(json.dumps(model.cfg.to_dict(), sort_keys=True)),
        "__groups__": np.array(json.dumps(
            {g.name: {"trainable": g.trainable, "checksum": g.checksum} for g in model.freeze_report()},
            sort_keys=True)),
    }
    for gname, mod in model.group_modules().items():
        for k, v in mod.state_dict().items():
            arrays[f"{gname}/{k}"] = v.detach().cpu().numpy()
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_checkpoint_config(path) -> RunConfig:
    with _open_npz(path) as z:
        return RunConfig.from_dict(json.loads(str(z["__config__"])))


def load_checkpoint(path, expect: RunConfig | None = None) -> EMoETracker:
    """Rebuild a model from a checkpoint; ``expect`` pins architecture fields."""
    with _open_npz(path) as z:
        cfg = RunConfig.from_dict(json.loads(str(z["__config__"])))
        if expect is not None:
            _check_compatible(cfg, expect)
        model = EMoETracker(cfg)
        for gname, mod in model.group_modules().items():
            state = {k[len(gname) + 1:]: torch.from_numpy(np.array(z[k]))
                     for k in z.files if k.startswith(gname + "/")}
            missing = set(mod.state_dict()) - set(state)
            if missing:
                raise DataError(f"checkpoint {path} lacks {gname} tensors {sorted(missing)[:3]}")
            mod.load_state_dict(state)
        recorded = json.loads(str(z["__groups__"]))
    for gname, got in model.checksums().items():
        if gname in recorded and recorded[gname]["checksum"] != got:
            raise DataError(f"checkpoint {path}: {gname} checksum mismatch; file is corrupt")
    model.eval()
    return model


def _open_npz(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no checkpoint at {path}")
    z = np.load(path, allow_pickle=False)
    if "__magic__" not in z.files or str(z["__magic__"]) != MAGIC:
        z.close()
        raise DataError(f"{path} is not an {MAGIC} checkpoint")
    if int(z["__version__"]) != FORMAT_VERSION:
        z.close()
        raise DataError(f"{path}: unsupported checkpoint version {int(z['__version__'])}")
    return z


def _check_compatible(found: RunConfig, expect: RunConfig):
    pairs = [("emoe.num_experts", found.emoe.num_experts, expect.emoe.num_experts),
             ("emoe.insert_interval", found.emoe.insert_interval, expect.emoe.insert_interval),
             ("model.dim", found.model.dim, expect.model.dim),
             ("model.depth", found.model.depth, expect.model.depth)]
    for key, a, b in pairs:
        if a != b:
            raise ConfigError(f"config mismatch: checkpoint has {key}={a}, requested {b}")
