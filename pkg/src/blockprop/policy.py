"""Attention encoder-decoder routing policy.

The encoder embeds 2-D miner coordinates and runs ``n_layers`` graph
attention layers (multi-head attention over adjacent miners, batch norm,
feed-forward, skip connections). The decoder builds a trajectory one miner at
a time from a context of ``[graph, prev2, prev1]`` embeddings, with learned
placeholders for the first two steps, a multi-head glimpse and a single-head
pointer whose logits are clipped by ``C * tanh``.

Shapes: ``B`` instances, ``M`` miners, ``d_h`` embedding width.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError, InfeasibleError
from .network import MinerInstance

NEG_SENTINEL = -1e9
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 128
    n_layers: int = 3
    n_heads: int = 8
    ff_hidden: int = 512
    tanh_clip: float = 10.0
    reputation_feature: bool = False  # append reputation to the 2-D location input

    @property
    def node_dim(self) -> int:
        return 3 if self.reputation_feature else 2

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim={self.embed_dim} not divisible by n_heads={self.n_heads}")


class MultiHeadAttention(nn.Module):
    """Per-head Q/K/V projections; head outputs are mapped back by per-head W^O and summed."""

    def __init__(self, n_heads: int, embed_dim: int, query_dim: int | None = None):
        super().__init__()
        self.n_heads = n_heads
        self.key_dim = embed_dim // n_heads
        query_dim = query_dim or embed_dim
        self.W_query = nn.Parameter(torch.empty(n_heads, self.key_dim, query_dim))
        self.W_key = nn.Parameter(torch.empty(n_heads, self.key_dim, embed_dim))
        self.W_val = nn.Parameter(torch.empty(n_heads, self.key_dim, embed_dim))
        self.W_out = nn.Parameter(torch.empty(n_heads, embed_dim, self.key_dim))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for p in (self.W_query, self.W_key, self.W_val):
                bound = 1.0 / math.sqrt(p.size(-1))
                p.uniform_(-bound, bound, generator=generator)
            bound = 1.0 / math.sqrt(self.W_out.size(1))
            self.W_out.uniform_(-bound, bound, generator=generator)

    def forward(self, q: torch.Tensor, h: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``q``: (B, n_q, d_q), ``h``: (B, M, d_h), ``mask``: (B, n_q, M) True = blocked."""
        Q = torch.einsum("ykd,bnd->ybnk", self.W_query, q)
        K = torch.einsum("ykd,bmd->ybmk", self.W_key, h)
        V = torch.einsum("ykd,bmd->ybmk", self.W_val, h)
        compat = Q @ K.transpose(-1, -2) / math.sqrt(self.key_dim)  # (Y, B, n_q, M)
        if mask is not None:
            compat = compat.masked_fill(mask.unsqueeze(0), NEG_SENTINEL)
        attn = torch.softmax(compat, dim=-1)
        if mask is not None:
            # a query with no admissible keys gets a zero update
            attn = attn.masked_fill(mask.unsqueeze(0), 0.0)
        heads = attn @ V  # (Y, B, n_q, d_k)
        return torch.einsum("yhk,ybnk->bnh", self.W_out, heads)


class Normalization(nn.Module):
    def __init__(self, embed_dim: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(embed_dim, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(x.reshape(-1, x.size(-1))).view(*x.shape)


class GraphAttentionLayer(nn.Module):
    def __init__(self, n_heads: int, embed_dim: int, ff_hidden: int):
        super().__init__()
        self.mha = MultiHeadAttention(n_heads, embed_dim)
        self.norm1 = Normalization(embed_dim)
        self.ff = nn.Sequential(nn.Linear(embed_dim, ff_hidden), nn.ReLU(), nn.Linear(ff_hidden, embed_dim))
        self.norm2 = Normalization(embed_dim)

    def forward(self, h: torch.Tensor, blocked: torch.Tensor) -> torch.Tensor:
        h_hat = self.norm1(h + self.mha(h, h, blocked))
        return self.norm2(h_hat + self.ff(h_hat))


class GraphEncoder(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.init_embed = nn.Linear(cfg.node_dim, cfg.embed_dim)
        self.layers = nn.ModuleList(
            GraphAttentionLayer(cfg.n_heads, cfg.embed_dim, cfg.ff_hidden) for _ in range(cfg.n_layers)
        )

    def forward(self, coords: torch.Tensor, adjacency: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.init_embed(coords)
        blocked = ~adjacency
        for layer in self.layers:
            h = layer(h, blocked)
        return h, h.mean(dim=1)


@dataclass
class DecoderState:
    """Batched decoding state. Masks are True where a miner is blocked."""

    step: int
    visited: torch.Tensor          # (B, M) bool
    reputation_blocked: torch.Tensor  # (B, M) bool
    adjacency: torch.Tensor        # (B, M, M) bool
    first: torch.Tensor | None = None   # (B,) long
    prev2: torch.Tensor | None = None
    prev1: torch.Tensor | None = None
    log_prob: torch.Tensor | None = None  # (B,)
    mask_first: bool = True

    @classmethod
    def initial(cls, reputation_blocked: torch.Tensor, adjacency: torch.Tensor, mask_first: bool = True,
                dtype: torch.dtype = torch.float32) -> "DecoderState":
        B, M = reputation_blocked.shape
        return cls(1, torch.zeros(B, M, dtype=torch.bool, device=reputation_blocked.device),
                   reputation_blocked, adjacency,
                   log_prob=torch.zeros(B, dtype=dtype, device=reputation_blocked.device), mask_first=mask_first)

    def blocked(self) -> torch.Tensor:
        mask = self.visited.clone()
        if self.step > 1 or self.mask_first:
            mask |= self.reputation_blocked
        if self.prev1 is not None:
            rows = self.adjacency[torch.arange(len(self.prev1)), self.prev1]
            mask |= ~rows
        return mask

    def advance(self, selected: torch.Tensor, step_log_prob: torch.Tensor) -> "DecoderState":
        visited = self.visited.clone()
        visited[torch.arange(len(selected)), selected] = True
        return DecoderState(
            self.step + 1, visited, self.reputation_blocked, self.adjacency,
            first=selected if self.first is None else self.first,
            prev2=self.prev1, prev1=selected,
            log_prob=self.log_prob + step_log_prob, mask_first=self.mask_first,
        )


@dataclass
class RolloutResult:
    actions: torch.Tensor      # (B, m) long
    log_prob: torch.Tensor     # (B,) summed log-probability
    step_log_probs: torch.Tensor  # (B, m)
    step_probs: torch.Tensor | None = None  # (B, m, M) when requested


def fan_in_init(root: nn.Module, embed_dim: int, generator: torch.Generator | None = None) -> None:
    """Fan-in uniform init for the Linear, attention and batch-norm modules under ``root``."""
    bound = 1.0 / math.sqrt(embed_dim)
    with torch.no_grad():
        for module in root.modules():
            if isinstance(module, nn.Linear):
                b = 1.0 / math.sqrt(module.in_features)
                module.weight.uniform_(-b, b, generator=generator)
                module.bias.uniform_(-b, b, generator=generator)
            elif isinstance(module, MultiHeadAttention):
                module.reset_parameters(generator)
            elif isinstance(module, nn.BatchNorm1d):
                module.weight.uniform_(-bound, bound, generator=generator)
                module.bias.uniform_(-bound, bound, generator=generator)


class AttentionPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PolicyConfig()
        d = cfg.embed_dim
        self.encoder = GraphEncoder(cfg)
        self.v1 = nn.Parameter(torch.empty(d))
        self.v2 = nn.Parameter(torch.empty(d))
        self.glimpse = MultiHeadAttention(cfg.n_heads, d, query_dim=3 * d)
        self.W_pointer_query = nn.Parameter(torch.empty(d, d))
        self.W_pointer_key = nn.Parameter(torch.empty(d, d))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        """Uniform init in ``(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for every tensor."""
        d = self.cfg.embed_dim
        fan_in_init(self, d, generator)
        with torch.no_grad():
            for p in (self.v1, self.v2, self.W_pointer_query, self.W_pointer_key):
                p.uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d), generator=generator)

    # -- encoder -----------------------------------------------------------
    def encode(self, coords: torch.Tensor, adjacency: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if coords.size(-1) != self.cfg.node_dim:
            raise ConfigError(f"expected {self.cfg.node_dim}-d features, got {coords.size(-1)}")
        return self.encoder(coords, adjacency)

    # -- decoder -----------------------------------------------------------
    def _context(self, state: DecoderState, h: torch.Tensor, graph: torch.Tensor) -> torch.Tensor:
        B = h.size(0)
        idx = torch.arange(B, device=h.device)
        if state.step == 1:
            a, b = self.v1.expand(B, -1), self.v2.expand(B, -1)
        elif state.step == 2:
            a, b = self.v2.expand(B, -1), h[idx, state.prev1]
        else:
            a, b = h[idx, state.prev2], h[idx, state.prev1]
        return torch.cat([graph, a, b], dim=-1)

    def pointer_logits(self, state: DecoderState, h: torch.Tensor, graph: torch.Tensor,
                       blocked: torch.Tensor) -> torch.Tensor:
        """Clipped compatibilities ``C * tanh(q.k / sqrt(d))`` before masking, (B, M)."""
        ctx = self._context(state, h, graph).unsqueeze(1)
        g = self.glimpse(ctx, h, blocked.unsqueeze(1)).squeeze(1)  # (B, d)
        q = g @ self.W_pointer_query.T
        k = h @ self.W_pointer_key.T
        compat = torch.einsum("bd,bmd->bm", q, k) / math.sqrt(self.cfg.embed_dim)
        return self.cfg.tanh_clip * torch.tanh(compat)

    def step_log_probs(self, state: DecoderState, h: torch.Tensor, graph: torch.Tensor) -> torch.Tensor:
        blocked = state.blocked()
        if bool(blocked.all(dim=1).any()):
            bad = torch.nonzero(blocked.all(dim=1)).flatten().tolist()
            raise InfeasibleError(f"every miner is masked at step {state.step} for instances {bad}")
        logits = self.pointer_logits(state, h, graph, blocked).masked_fill(blocked, NEG_SENTINEL)
        logp = torch.log_softmax(logits, dim=-1)
        return logp.masked_fill(blocked, -math.inf)

    def decode_step(self, state: DecoderState, h: torch.Tensor, graph: torch.Tensor) -> torch.Tensor:
        """Selection probabilities over all miners; blocked miners get exactly 0."""
        return self.step_log_probs(state, h, graph).exp()

    def rollout(
        self,
        coords: torch.Tensor,
        adjacency: torch.Tensor,
        reputation_blocked: torch.Tensor,
        steps: int,
        mode: str = "greedy",
        generator: torch.Generator | None = None,
        actions: torch.Tensor | None = None,
        mask_first: bool = True,
        keep_probs: bool = False,
    ) -> RolloutResult:
        """Decode ``steps`` miners per instance.

        ``mode`` is ``"greedy"``, ``"sample"`` or ``"follow"``; the last
        replays ``actions`` and returns their log-probability (used for
        gradient checks).
        """
        if mode not in ("greedy", "sample", "follow"):
            raise ConfigError(f"unknown decode mode {mode!r}")
        check_feasible(reputation_blocked, steps)
        h, graph = self.encode(coords, adjacency)
        state = DecoderState.initial(reputation_blocked, adjacency, mask_first, dtype=h.dtype)
        chosen, step_lp, probs = [], [], []
        for t in range(steps):
            logp = self.step_log_probs(state, h, graph)
            if mode == "greedy":
                sel = logp.argmax(dim=-1)
            elif mode == "sample":
                sel = torch.multinomial(logp.exp(), 1, generator=generator).squeeze(1)
            else:
                sel = actions[:, t]
            lp = logp.gather(1, sel.unsqueeze(1)).squeeze(1)
            if keep_probs:
                probs.append(logp.exp())
            chosen.append(sel)
            step_lp.append(lp)
            state = state.advance(sel, lp)
        return RolloutResult(
            torch.stack(chosen, 1), state.log_prob, torch.stack(step_lp, 1),
            torch.stack(probs, 1) if keep_probs else None,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def check_feasible(reputation_blocked: torch.Tensor, steps: int) -> None:
    # even with the first pick exempt, the policy may spend it on an eligible
    # miner, so ``steps`` eligible miners are needed either way
    eligible = (~reputation_blocked).sum(dim=1)
    need = steps
    M = reputation_blocked.size(1)
    short = torch.nonzero(eligible < need).flatten()
    if steps > M:
        raise InfeasibleError(f"trajectory of {steps} miners requested from only {M}")
    if len(short):
        i = int(short[0])
        raise InfeasibleError(
            f"instance {i} has {int(eligible[i])} eligible miners but the trajectory needs {need} "
            f"(shortfall {need - int(eligible[i])}; {len(short)} instance(s) affected)"
        )


def instances_to_tensors(instances: Sequence[MinerInstance], sigma: float | None,
                         dtype: torch.dtype = torch.float32,
                         with_reputation: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack instances into (coords, adjacency, reputation_blocked); ``sigma=None`` disables the mask.

    ``with_reputation`` adds each miner's reputation as a third coordinate column,
    for policies built with ``reputation_feature=True``.
    """
    feats = [i.coords for i in instances]
    if with_reputation:
        feats = [np.column_stack([i.coords, i.reputation]) for i in instances]
    coords = torch.as_tensor(np.stack(feats), dtype=dtype)
    adj = torch.as_tensor(np.stack([i.adjacency for i in instances]))
    if sigma is None:
        blocked = torch.zeros(adj.shape[:2], dtype=torch.bool)
    else:
        blocked = torch.as_tensor(np.stack([~i.eligible(sigma) for i in instances]))
    return coords, adj, blocked


def route_lengths(coords: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Open-path length over consecutive selected miners, (B,); extra feature columns are ignored."""
    coords = coords[..., :2]
    pts = coords.gather(1, actions.unsqueeze(-1).expand(-1, -1, 2))
    return (pts[:, 1:] - pts[:, :-1]).norm(dim=-1).sum(dim=1)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, policy: AttentionPolicy, fingerprint: dict, **extra) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "policy_config": asdict(policy.cfg),
        "fingerprint": fingerprint,
        "state_dict": policy.state_dict(),
        **extra,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[AttentionPolicy, dict]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}; run `blockprop train --checkpoint {p}` first")
    payload = torch.load(p, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    policy = AttentionPolicy(PolicyConfig(**payload["policy_config"]))
    expected = policy.state_dict()
    for name, tensor in payload["state_dict"].items():
        if name not in expected or expected[name].shape != tensor.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {tuple(tensor.shape)}, "
                                  f"model {tuple(expected[name].shape) if name in expected else None}")
    missing = set(expected) - set(payload["state_dict"])
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    policy.load_state_dict(payload["state_dict"])
    policy.eval()
    return policy, payload
