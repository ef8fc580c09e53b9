"""Dynamic-GCN accident anticipation network.

Every temporal stage is evaluated one frame at a time on fixed-shape tensors.
That costs some speed but makes outputs for frames <= t bit-identical whether
or not later frames are present, which the causality contract relies on.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_model import NUM_OBJECT_SLOTS, FeatureBundle
from .geometry import DEFAULT_DEPTH_SCALE, VEL_MODES, edge_weights, geometry_sequence

HEAD_KINDS = ("gru", "lstm", "transformer", "tcn")


@dataclass
class ModelConfig:
    feature_dim: int = 512
    hidden_dim: int | None = None
    num_slots: int = NUM_OBJECT_SLOTS
    gcn_layers: int = 2
    dilated_layers: int = 3
    kernel_size: int = 2
    dilations: tuple[int, ...] = (1, 2, 4)
    temporal_head: str = "gru"
    use_gru_head: bool = True
    use_dilated: bool = True
    use_dgcn: bool = True
    use_adaptive_adj: bool = True
    vel_mode: str = "raw"
    depth_scale: float = DEFAULT_DEPTH_SCALE
    paper_compat: bool = False
    init_a: float = 1.0
    attention_heads: int = 4
    tcn_dilations: tuple[int, ...] = (1, 2, 4, 8)
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(int(r) for r in self.dilations)
        self.tcn_dilations = tuple(int(r) for r in self.tcn_dilations)
        if self.hidden_dim is None:
            self.hidden_dim = self.feature_dim
        if len(self.dilations) != self.dilated_layers:
            raise ValueError("dilations must have one rate per dilated layer")
        if self.temporal_head not in HEAD_KINDS:
            raise ValueError(f"temporal_head must be one of {HEAD_KINDS}, got {self.temporal_head!r}")
        if self.vel_mode not in VEL_MODES:
            raise ValueError(f"vel_mode must be one of {VEL_MODES}")
        if self.kernel_size < 1 or any(r < 1 for r in self.dilations):
            raise ValueError("kernel size and dilations must be >= 1")
        if self.init_a <= 0:
            raise ValueError("init_a must be > 0")
        if self.temporal_head == "transformer" and self.hidden_dim % self.attention_heads:
            raise ValueError("hidden_dim must be divisible by attention_heads")

    @property
    def receptive_field(self) -> int:
        return 1 + sum(r * (self.kernel_size - 1) for r in self.dilations)

    def to_json(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        d["tcn_dilations"] = list(self.tcn_dilations)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**{"feature_dim": 32, "hidden_dim": 32, **overrides})


# -- functional pieces -------------------------------------------------------


def adaptive_adjacency(v1: torch.Tensor, v2: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of V1 @ V2."""
    return torch.softmax(v1 @ v2, dim=-1)


def effective_adjacency(adj: torch.Tensor, weights: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """row-normalize(adj * weights * mask + I), dividing by the row's absolute sum.

    Rows whose neighbours are all masked reduce to the self-loop.
    """
    n = weights.shape[-1]
    m = adj * weights * mask.to(weights.dtype) + torch.eye(n, dtype=weights.dtype, device=weights.device)
    return m / m.abs().sum(dim=-1, keepdim=True).clamp_min(1e-12)


def gcn_layer(h: torch.Tensor, adj: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    return torch.relu(adj @ h @ weight)


def masked_mean(h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(h.dtype).unsqueeze(-1)
    return (h * m).sum(dim=-2) / m.sum(dim=-2).clamp_min(1.0)


def spatial_recurrence(
    graph_feats: torch.Tensor, mask: torch.Tensor, cell: nn.LSTMCell
) -> torch.Tensor:
    """Masked-mean pool nodes per frame, then run an LSTM cell forward in time.

    graph_feats: [B, T, N, H], mask: [B, T, N] -> [B, T, H]
    """
    B, T = graph_feats.shape[:2]
    h = graph_feats.new_zeros(B, cell.hidden_size)
    c = graph_feats.new_zeros(B, cell.hidden_size)
    out = []
    for t in range(T):
        h, c = cell(masked_mean(graph_feats[:, t], mask[:, t]), (h, c))
        out.append(h)
    return torch.stack(out, dim=1)


def per_frame(fn, x: torch.Tensor) -> torch.Tensor:
    """Apply ``fn`` to each frame of [B, T, ...] separately."""
    return torch.stack([fn(x[:, t]) for t in range(x.shape[1])], dim=1)


class Fuse(nn.Module):
    """Concatenate graph state with the frame feature, then Linear + ReLU."""

    def __init__(self, hidden_dim: int, feature_dim: int):
        super().__init__()
        self.proj = nn.Linear(hidden_dim + feature_dim, hidden_dim)

    def forward(self, graph_hidden: torch.Tensor, frame_feat: torch.Tensor) -> torch.Tensor:
        x = torch.cat([graph_hidden, frame_feat], dim=-1)
        return per_frame(lambda f: torch.relu(self.proj(f)), x)


class DilatedConvStack(nn.Module):
    """Causal dilated convolutions, ReLU after every layer.

    Layer i computes y(t) = sum_k W_i[k] x(t - r_i * k) with zero left padding.
    """

    def __init__(self, channels: int, dilations, kernel_size: int = 2):
        super().__init__()
        self.dilations = tuple(dilations)
        self.kernel_size = kernel_size
        self.weights = nn.ParameterList(
            [nn.Parameter(torch.empty(kernel_size, channels, channels)) for _ in self.dilations]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        T = x.shape[1]
        for w, r in zip(self.weights, self.dilations):
            frames = []
            for t in range(T):
                y = x[:, t] @ w[0].T
                for k in range(1, self.kernel_size):
                    if t - r * k >= 0:
                        y = y + x[:, t - r * k] @ w[k].T
                frames.append(torch.relu(y))
            x = torch.stack(frames, dim=1)
        return x


class DilatedBlock(nn.Module):
    """Dilated convolution stack with residual add and layer normalization."""

    def __init__(self, channels: int, dilations=(1, 2, 4), kernel_size: int = 2):
        super().__init__()
        self.conv = DilatedConvStack(channels, dilations, kernel_size)
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        return per_frame(self.norm, y + x)


# -- temporal heads ----------------------------------------------------------


class RecurrentHead(nn.Module):
    def __init__(self, hidden_dim: int, kind: str):
        super().__init__()
        self.kind = kind
        self.cell = nn.GRUCell(hidden_dim, hidden_dim) if kind == "gru" else nn.LSTMCell(hidden_dim, hidden_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        B, T, H = z.shape
        h = z.new_zeros(B, H)
        c = z.new_zeros(B, H)
        out = []
        for t in range(T):
            if self.kind == "gru":
                h = self.cell(z[:, t], h)
            else:
                h, c = self.cell(z[:, t], (h, c))
            out.append(h)
        return torch.stack(out, dim=1)


def sinusoidal_position(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = t / torch.pow(10000.0, i / dim)
    pe = torch.zeros(dim, dtype=torch.float64)
    pe[0::2] = torch.sin(angle)
    pe[1::2] = torch.cos(angle[: dim // 2])
    return pe.to(dtype)


class CausalTransformerHead(nn.Module):
    """One post-norm encoder layer; frame t attends to frames <= t only."""

    def __init__(self, hidden_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden_dim, hidden_dim)
        self.k = nn.Linear(hidden_dim, hidden_dim)
        self.v = nn.Linear(hidden_dim, hidden_dim)
        self.o = nn.Linear(hidden_dim, hidden_dim)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.ff1 = nn.Linear(hidden_dim, 2 * hidden_dim)
        self.ff2 = nn.Linear(2 * hidden_dim, hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        B, T, H = z.shape
        dh = H // self.heads
        keys, values, out = [], [], []
        for t in range(T):
            x = z[:, t] + sinusoidal_position(t, H, z.dtype)
            q = self.q(x).view(B, self.heads, 1, dh)
            keys.append(self.k(x).view(B, self.heads, dh))
            values.append(self.v(x).view(B, self.heads, dh))
            K = torch.stack(keys, dim=2)  # [B, heads, t+1, dh]
            V = torch.stack(values, dim=2)
            att = torch.softmax((q * K).sum(-1) / math.sqrt(dh), dim=-1)  # [B, heads, t+1]
            ctx = (att.unsqueeze(-1) * V).sum(dim=2).reshape(B, H)
            x = self.norm1(x + self.o(ctx))
            x = self.norm2(x + self.ff2(torch.relu(self.ff1(x))))
            out.append(x)
        return torch.stack(out, dim=1)


class TCNHead(nn.Module):
    def __init__(self, hidden_dim: int, dilations=(1, 2, 4, 8), kernel_size: int = 2):
        super().__init__()
        self.block = DilatedBlock(hidden_dim, dilations, kernel_size)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.block(z)


def make_head(config: ModelConfig) -> nn.Module:
    if not config.use_gru_head:
        return nn.Identity()
    kind, H = config.temporal_head, config.hidden_dim
    if kind in ("gru", "lstm"):
        return RecurrentHead(H, kind)
    if kind == "transformer":
        return CausalTransformerHead(H, config.attention_heads)
    if kind == "tcn":
        return TCNHead(H, config.tcn_dilations, config.kernel_size)
    raise ValueError(f"unknown temporal head {kind!r}")


# -- full model --------------------------------------------------------------


def _softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class AccidentAnticipator(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        N, F_, H = config.num_slots, config.feature_dim, config.hidden_dim
        self.adj_v1 = nn.Parameter(torch.empty(N, N))
        self.adj_v2 = nn.Parameter(torch.empty(N, N))
        self.a_raw = nn.Parameter(torch.tensor(_softplus_inverse(config.init_a)))
        dims = [F_] + [H] * config.gcn_layers
        self.gcn_weights = nn.ParameterList(
            [nn.Parameter(torch.empty(dims[i], dims[i + 1])) for i in range(config.gcn_layers)]
        )
        self.spatial_lstm = nn.LSTMCell(dims[-1], H)
        self.fuse = Fuse(H, F_)
        self.temporal = (
            DilatedBlock(H, config.dilations, config.kernel_size) if config.use_dilated else nn.Identity()
        )
        self.head = make_head(config)
        self.classifier = nn.Linear(H, 2)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "a_raw":
                    p.fill_(_softplus_inverse(self.config.init_a))
                elif p.dim() == 1:
                    p.zero_()
                elif p.dim() == 3:
                    for k in range(p.shape[0]):
                        nn.init.xavier_uniform_(p[k], generator=g)
                else:
                    nn.init.xavier_uniform_(p, generator=g)
            for m in self.modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)

    @property
    def a(self) -> torch.Tensor:
        return F.softplus(self.a_raw)

    def adjacency(self) -> torch.Tensor:
        if self.config.use_adaptive_adj:
            return adaptive_adjacency(self.adj_v1, self.adj_v2)
        n = self.config.num_slots
        return self.adj_v1.new_full((n, n), 1.0 / n)

    def spatial(self, obj_feat, dist3d, relvel, mask) -> torch.Tensor:
        """Per-frame graph convolution. Returns node features [B, T, N, H]."""
        cfg = self.config
        A = self.adjacency()
        a = self.a
        out = []
        for t in range(obj_feat.shape[1]):
            h = obj_feat[:, t]
            if cfg.use_dgcn:
                m = mask[:, t]
                pm = m.unsqueeze(-1) & m.unsqueeze(-2)
                w = edge_weights(dist3d[:, t], relvel[:, t], a, pm, cfg.vel_mode)
                adj = effective_adjacency(A, w, pm)
                for W in self.gcn_weights:
                    h = gcn_layer(h, adj, W)
            else:
                for W in self.gcn_weights:
                    h = torch.relu(h @ W)
            out.append(h)
        return torch.stack(out, dim=1)

    def forward(self, batch: dict) -> torch.Tensor:
        """Per-frame logits [B, T, 2]."""
        cfg = self.config
        obj = batch["obj_feat"]
        if obj.shape[-2] != cfg.num_slots or obj.shape[-1] != cfg.feature_dim:
            raise ValueError(
                f"input has {obj.shape[-2]} slots x {obj.shape[-1]} features, "
                f"model expects {cfg.num_slots} x {cfg.feature_dim}"
            )
        nodes = self.spatial(obj, batch["dist3d"], batch["relvel"], batch["mask"])
        graph_hidden = spatial_recurrence(nodes, batch["mask"], self.spatial_lstm)
        fused = self.fuse(graph_hidden, batch["frame_feat"])
        z = self.temporal(fused)
        out = self.head(z)
        return per_frame(self.classifier, out)


def prepare_inputs(bundles: list[FeatureBundle], config: ModelConfig, dtype=torch.float32) -> dict:
    """Compute geometry and pad a list of clips to a common length."""
    T = max(b.num_frames for b in bundles)
    B, N, F_ = len(bundles), config.num_slots, config.feature_dim
    frame = np.zeros((B, T, F_))
    obj = np.zeros((B, T, N, F_))
    dist = np.zeros((B, T, N, N))
    vel = np.zeros((B, T, N, N))
    mask = np.zeros((B, T, N), dtype=bool)
    lengths = []
    for i, b in enumerate(bundles):
        if b.num_objects != N or b.feature_dim != F_:
            raise ValueError(
                f"bundle has {b.num_objects} slots x {b.feature_dim} features, "
                f"model expects {N} x {F_}"
            )
        geo = geometry_sequence(b, config.depth_scale, config.paper_compat)
        t = b.num_frames
        frame[i, :t] = b.frame_feat
        obj[i, :t] = b.obj_feat
        dist[i, :t] = geo.dist3d
        vel[i, :t] = geo.relvel
        mask[i, :t] = geo.mask
        lengths.append(t)
    return {
        "frame_feat": torch.as_tensor(frame, dtype=dtype),
        "obj_feat": torch.as_tensor(obj, dtype=dtype),
        "dist3d": torch.as_tensor(dist, dtype=dtype),
        "relvel": torch.as_tensor(vel, dtype=dtype),
        "mask": torch.as_tensor(mask),
        "lengths": torch.as_tensor(lengths),
    }


def build_model(config: ModelConfig, dtype=torch.float32) -> AccidentAnticipator:
    return AccidentAnticipator(config).to(dtype)


def accident_probs(model: AccidentAnticipator, bundles: list[FeatureBundle]) -> list[np.ndarray]:
    """Accident-class probability per frame for each clip."""
    dtype = next(model.parameters()).dtype
    batch = prepare_inputs(bundles, model.config, dtype)
    with torch.no_grad():
        p = torch.softmax(model(batch), dim=-1)[..., 1].double().numpy()
    return [p[i, : b.num_frames].copy() for i, b in enumerate(bundles)]
