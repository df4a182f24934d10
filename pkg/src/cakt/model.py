"""Network definitions: the convolution-augmented tracer, its ablation
variants and the plain LSTM baseline.

The main model embeds each interaction one-hot, runs an LSTM over the whole
sequence for the overall knowledge state h_t, extracts a same-concept state
m_t by pushing the decayed k x H x W history stack through four residual 3D
conv blocks with per-time-slice reweighting, fuses the two states with a
sigmoid gate and transforms the fused sequence with a second LSTM into
per-concept mastery probabilities y_t.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cakt.config import CAKTConfig
from cakt.history import ExponentialDecay, history_indices


@dataclass
class PredictionTrace:
    """Per-step outputs of a forward pass over a batch.

    ``mastery``: (B, T-1, M) probabilities y_t; ``preds``/``labels``/``mask``:
    (B, T-1) next-step prediction, ground truth and validity flag.
    """

    mastery: torch.Tensor
    preds: torch.Tensor
    labels: torch.Tensor
    mask: torch.Tensor
    target_concepts: torch.Tensor


class TimeSqueezeExcite(nn.Module):
    """Reweight the k time slices of a (B, C, k, H, W) tensor.

    Squeeze: mean over channels and space per time index.  Excite: two
    affine maps (k -> max(1, k//2) -> k) with ReLU then sigmoid.  Scale:
    multiply each time slice, broadcast over channels, by its weight.
    """

    def __init__(self, k: int):
        super().__init__()
        hidden = max(1, k // 2)
        self.fc1 = nn.Linear(k, hidden)
        self.fc2 = nn.Linear(hidden, k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=(1, 3, 4))
        weights = torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))
        return x * weights[:, None, :, None, None]


class BasicBlock(nn.Module):
    """conv-BN-ReLU-conv-BN-TSE with a 1x1x1 residual projection, final ReLU.

    Stride 1 and single zero padding on every axis keep (k, H, W) unchanged.
    ``kernel_time=1`` turns both convs into per-slice 2D convs with shared
    kernels (the 2D ablation) while keeping everything else intact.
    """

    def __init__(self, in_c: int, mid_c: int, out_c: int, k: int, kernel_time: int = 3):
        super().__init__()
        kt = kernel_time
        kernel = (kt, 3, 3)
        pad = (kt // 2, 1, 1)
        self.conv1 = nn.Conv3d(in_c, mid_c, kernel, stride=1, padding=pad, bias=False)
        self.bn1 = nn.BatchNorm3d(mid_c)
        self.conv2 = nn.Conv3d(mid_c, out_c, kernel, stride=1, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm3d(out_c)
        self.tse = TimeSqueezeExcite(k)
        self.downsample = nn.Conv3d(in_c, out_c, kernel_size=1, stride=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.tse(self.bn2(self.conv2(out)))
        return F.relu(out + self.downsample(x))


class ConvStack(nn.Module):
    """Four BasicBlocks; channels 1->4->8->4->1, shape (k, H, W) preserved."""

    def __init__(self, cfg: CAKTConfig, kernel_time: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList(
            [
                BasicBlock(in_c, mid_c, out_c, cfg.k, kernel_time=kernel_time)
                for in_c, mid_c, out_c in cfg.channel_plan
            ]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def global_time_pool(x: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis of a (B, 1, k, H, W) tensor, flattened row-major to (B, H*W)."""
    if x.shape[1] != 1:
        raise ValueError(f"expected a single channel, got {x.shape[1]}")
    return x[:, 0].mean(dim=1).flatten(1)


class FusionGate(nn.Module):
    """Adaptive gates z1, z2 = sigmoid([m + h concat] W + b); output z1*m + z2*h."""

    def __init__(self, d: int):
        super().__init__()
        self.gate1 = nn.Linear(2 * d, d)
        self.gate2 = nn.Linear(2 * d, d)

    def forward(self, m: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if m.shape[-1] != h.shape[-1]:
            raise ValueError(f"length mismatch: {m.shape[-1]} vs {h.shape[-1]}")
        cat = torch.cat([m, h], dim=-1)
        z1 = torch.sigmoid(self.gate1(cat))
        z2 = torch.sigmoid(self.gate2(cat))
        return z1 * m + z2 * h


class SelfAttentionWindow(nn.Module):
    """Single-head scaled dot-product attention over the k slots, mean-aggregated."""

    def __init__(self, d: int):
        super().__init__()
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        q, k, v = self.q(slots), self.k(slots), self.v(slots)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        return (attn @ v).mean(dim=-2)


class CAKT(nn.Module):
    """The full model; ``cfg.variant`` selects the baseline or an ablation."""

    def __init__(self, cfg: CAKTConfig):
        super().__init__()
        self.cfg = cfg  # variant validity enforced by CAKTConfig
        d = cfg.d_e
        self.embed = nn.Linear(2 * cfg.M, d)
        self.lstm_in = nn.LSTM(d, cfg.d_h, batch_first=True)

        v = cfg.variant
        if v == "DKT_BASELINE":
            self.proj = nn.Linear(cfg.d_h, cfg.M)
        else:
            if v in ("CAKT", "NO_EXP_DECAY", "FC_POOLING", "FC_OUTPUT", "MEAN_FUSION"):
                self.conv = ConvStack(cfg)
            elif v == "C2D_LC":
                self.conv = ConvStack(cfg, kernel_time=1)
            elif v == "LSTM_LC":
                self.lc_lstm = nn.LSTM(d, d, batch_first=True)
            elif v == "FC_LC":
                self.lc_fc = nn.Linear(cfg.k * d, d)
            elif v == "SA_LC":
                self.lc_attn = SelfAttentionWindow(d)
            if v == "FC_POOLING":
                self.pool_fc = nn.Linear(cfg.k * cfg.H * cfg.W, d)
            if v not in ("LSTM_LC", "FC_LC", "SA_LC", "NO_EXP_DECAY"):
                self.decay = ExponentialDecay(init_theta=float(cfg.k))
            if v != "MEAN_FUSION":
                self.fusion = FusionGate(d)
            if v == "FC_OUTPUT":
                self.out_fc = nn.Linear(d, cfg.M)
            else:
                self.lstm_out = nn.LSTM(d, cfg.d_h, batch_first=True)
                self.proj = nn.Linear(cfg.d_h, cfg.M)

        self._init_parameters(cfg.seed)

    def _init_parameters(self, seed: int) -> None:
        """Fan-in uniform affine/conv maps, orthogonal recurrent kernels, zero biases."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("theta_raw"):
                continue
            if any(part.startswith("bn") for part in name.split(".")):
                continue  # BatchNorm keeps scale 1 / shift 0
            if p.dim() >= 2:
                if "weight_hh" in name:
                    # per-gate orthogonal blocks
                    rows = p.shape[0] // 4
                    with torch.no_grad():
                        for g in range(4):
                            block = torch.empty(rows, p.shape[1])
                            nn.init.orthogonal_(block, gain=1.0)
                            p[g * rows : (g + 1) * rows].copy_(block)
                else:
                    fan_in = p.shape[1] if p.dim() == 2 else int(np.prod(p.shape[1:]))
                    bound = 1.0 / math.sqrt(max(fan_in, 1))
                    with torch.no_grad():
                        p.uniform_(-bound, bound, generator=gen)
            else:
                with torch.no_grad():
                    p.zero_()

    # -- feature paths -----------------------------------------------------

    def _gather_slots(self, x, hist_idx, hist_gaps, pmask):
        """Select window embeddings for every valid prediction position.

        Returns (slots, gaps, pad) with shapes (P, k, d), (P, k), (P, k),
        where P is the number of valid positions.  Only valid positions flow
        into the conv stack, so batch statistics never see padding.
        """
        B, T, d = x.shape
        pos_b, pos_t = torch.nonzero(pmask, as_tuple=True)
        idx = hist_idx[pos_b, pos_t]
        gaps = hist_gaps[pos_b, pos_t]
        pad = idx < 0
        slots = x[pos_b.unsqueeze(1), idx.clamp(min=0)]
        slots = slots * (~pad).unsqueeze(-1).to(slots.dtype)
        return slots, gaps, pad, (pos_b, pos_t)

    def _same_concept_state(self, x, hist_idx, hist_gaps, pmask):
        """m_t for every valid position, scattered into a (B, T-1, d) tensor."""
        B, T, d = x.shape
        cfg = self.cfg
        m = x.new_zeros(B, T - 1, d)
        slots, gaps, pad, (pos_b, pos_t) = self._gather_slots(x, hist_idx, hist_gaps, pmask)
        if slots.shape[0] == 0:
            return m
        if hasattr(self, "decay"):
            slots = self.decay(slots, gaps, pad)

        v = cfg.variant
        if v == "LSTM_LC":
            out, _ = self.lc_lstm(slots)
            feat = out[:, -1]
        elif v == "FC_LC":
            feat = self.lc_fc(slots.flatten(1))
        elif v == "SA_LC":
            feat = self.lc_attn(slots)
        else:
            stack = slots.reshape(-1, cfg.k, cfg.H, cfg.W).unsqueeze(1)
            out = self.conv(stack)
            if v == "FC_POOLING":
                feat = self.pool_fc(out.flatten(1))
            else:
                feat = global_time_pool(out)
        m[pos_b, pos_t] = feat
        return m

    # -- forward -----------------------------------------------------------

    def forward(self, batch: dict) -> PredictionTrace:
        """Run the model over a padded batch.

        ``batch`` keys: onehots (B,T,2M), concepts (B,T), responses (B,T),
        mask (B,T), and for non-baseline variants hist_idx / hist_gaps
        (B,T-1,k).  Predictions exist for steps 1..T-1; position t in the
        outputs targets step t+1.
        """
        mask = batch["mask"]
        # trailing all-masked steps are dead computation; trimming them also
        # keeps losses and gradients bitwise independent of appended padding
        valid_cols = mask.any(dim=0)
        T_eff = int(valid_cols.nonzero().max().item()) + 1 if valid_cols.any() else 0
        onehots = batch["onehots"][:, :T_eff].contiguous()
        concepts = batch["concepts"][:, :T_eff]
        responses = batch["responses"][:, :T_eff]
        mask = mask[:, :T_eff]
        batch = dict(batch)
        if "hist_idx" in batch and T_eff >= 1:
            batch["hist_idx"] = batch["hist_idx"][:, : T_eff - 1]
            batch["hist_gaps"] = batch["hist_gaps"][:, : T_eff - 1]
        B, T, _ = onehots.shape
        if T < 2:
            # keep the empty outputs on the autograd graph so a downstream
            # zero loss still backpropagates (to all-zero gradients)
            anchor = self.embed.weight.sum() * 0.0
            empty = onehots.new_zeros(B, 0) + anchor
            return PredictionTrace(
                mastery=onehots.new_zeros(B, 0, self.cfg.M),
                preds=empty,
                labels=empty,
                mask=torch.zeros(B, 0, dtype=torch.bool, device=onehots.device),
                target_concepts=torch.zeros(B, 0, dtype=torch.long, device=onehots.device),
            )

        x = self.embed(onehots)
        pmask = mask[:, 1:]

        if self.cfg.variant == "DKT_BASELINE":
            h, _ = self.lstm_in(x)
            y = torch.sigmoid(self.proj(h[:, :-1]))
        else:
            h, _ = self.lstm_in(x)
            m = self._same_concept_state(x, batch["hist_idx"], batch["hist_gaps"], pmask)
            h_prev = h[:, :-1]
            if self.cfg.variant == "MEAN_FUSION":
                fused = 0.5 * (m + h_prev)
            else:
                fused = self.fusion(m, h_prev)
            if self.cfg.variant == "FC_OUTPUT":
                y = torch.sigmoid(self.out_fc(fused))
            else:
                out, _ = self.lstm_out(fused)
                y = torch.sigmoid(self.proj(out))

        target = concepts[:, 1:]
        preds = y.gather(2, target.unsqueeze(-1)).squeeze(-1)
        return PredictionTrace(
            mastery=y,
            preds=preds,
            labels=responses[:, 1:].to(y.dtype),
            mask=pmask,
            target_concepts=target,
        )

    def trace(self, sequence) -> PredictionTrace:
        """Forward a single encoded sequence (no grad, eval mode)."""
        from cakt.training import make_batch  # local import to avoid a cycle

        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                batch = make_batch([sequence], self.cfg.M, self.cfg.k)
                batch = {
                    k: v.to(next(self.parameters()).dtype) if v.is_floating_point() else v
                    for k, v in batch.items()
                }
                return self.forward(batch)
        finally:
            self.train(was_training)


def build_variant(cfg: CAKTConfig) -> CAKT:
    """Construct the model named by ``cfg.variant`` (raises on unknown names)."""
    return CAKT(cfg)


def parameter_groups(model: CAKT) -> dict:
    """Named parameter groups, for gradient checking and weight decay."""
    groups: dict = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        groups.setdefault(top, []).append((name, p))
    return groups


def decay_exempt(name: str) -> bool:
    """Parameters excluded from weight decay: biases, BN scale/shift, theta."""
    parts = name.split(".")
    return name.endswith("bias") or "bn1" in parts or "bn2" in parts or name.endswith("theta_raw")


# -- checkpointing ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: CAKT, optimizer=None, extra: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_cfg": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple:
    """Returns (model, payload).  The rebuilt model is bit-exact with the saved one."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = CAKTConfig.from_dict(payload["model_cfg"])
    model = CAKT(cfg)
    sample = next(iter(payload["state_dict"].values()))
    if sample.dtype == torch.float64:
        model.double()
    model.load_state_dict(payload["state_dict"])
    return model, payload


def state_digest(model: nn.Module) -> str:
    """SHA-256 over all state tensors (parameters and buffers) in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
