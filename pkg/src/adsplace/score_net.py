"""Score-model interface and a reference message-passing network with two vector heads.

The reference net works on invariant node features (species, role, noise
levels, optional energy condition) updated by continuous-filter messages over
a periodic radius graph. Vector outputs are built only from sums of edge unit
vectors weighted by invariant scalars, so they rotate with the system and are
unchanged by lattice translations and atom reordering.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from . import igso3
from .errors import ContractViolation, GradientOverflow, InvalidSigma, MissingCondition
from .lattice import AdslabSystem, Tag, minimum_image, periodic_neighbors, whole_adsorbate
from .noise import ScoreTarget

CHECKPOINT_VERSION = 1
DTYPE = torch.float64
UNKNOWN = 0  # embedding row shared by all species outside the vocabulary


@dataclass
class ScoreModelInput:
    system: AdslabSystem
    tr_sigma: float
    rot_sigma: float
    condition: Optional[float] = None

    def __post_init__(self):
        self.system.require_adslab()
        if not (self.tr_sigma > 0 and self.rot_sigma > 0):
            raise InvalidSigma(f"sigmas must be positive, got {self.tr_sigma}, {self.rot_sigma}")


@dataclass
class ScoreModelOutput:
    tr_vec: np.ndarray
    rot_vec: np.ndarray


class ScoreModel(Protocol):
    """Anything that maps perturbed adslabs to (translation, rotation) scores."""

    conditional: bool

    def predict(self, inputs: Sequence[ScoreModelInput]) -> list[ScoreModelOutput]: ...


@dataclass(frozen=True)
class NetConfig:
    cutoff: float = 6.0
    n_rbf: int = 32
    hidden_dim: int = 64
    n_message_rounds: int = 3
    n_freq: int = 6
    species: tuple = ()
    conditional: bool = False
    # Aggregated messages are divided by this (typical neighbour count).
    aggregation_norm: float = 20.0

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ContractViolation("cutoff must be positive")
        if min(self.n_rbf, self.hidden_dim, self.n_freq) < 1 or self.n_message_rounds < 0:
            raise ContractViolation("layer sizes must be positive")
        object.__setattr__(self, "species", tuple(sorted(int(z) for z in self.species)))

    @property
    def cond_dim(self) -> int:
        per_value = 2 * self.n_freq + 1
        return per_value * (3 if self.conditional else 2)


# -- graph batching -------------------------------------------------------------


@dataclass
class GraphBatch:
    species_idx: torch.Tensor  # (N,)
    tags: torch.Tensor  # (N,)
    node_graph: torch.Tensor  # (N,)
    receivers: torch.Tensor  # (E,)
    senders: torch.Tensor  # (E,)
    dist: torch.Tensor  # (E,)
    unit: torch.Tensor  # (E, 3), receiver -> sender
    ads_nodes: torch.Tensor  # (A,)
    ads_rel: torch.Tensor  # (A, 3), minimum-image offset from the adsorbate COM
    ads_graph: torch.Tensor  # (A,)
    cond: torch.Tensor  # (G, cond_dim)
    tr_sigma: torch.Tensor  # (G,)
    rot_scale: torch.Tensor  # (G,) sqrt(E|rot score|^2) at rot_sigma
    n_graphs: int
    unknown_species: list = field(default_factory=list)


def sinusoidal(values, n_freq: int) -> np.ndarray:
    """[v, sin(w_k v), cos(w_k v)] with w_k = 2**k / 2 for k < n_freq."""
    v = np.asarray(values, float).reshape(-1, 1)
    w = 0.5 * 2.0 ** np.arange(n_freq)
    return np.concatenate([v, np.sin(v * w), np.cos(v * w)], axis=1)


def condition_features(config: NetConfig, tr_sigma, rot_sigma, condition=None) -> np.ndarray:
    feats = [sinusoidal(np.log(tr_sigma), config.n_freq), sinusoidal(np.log(rot_sigma), config.n_freq)]
    if config.conditional:
        if condition is None or np.any([c is None for c in np.atleast_1d(np.asarray(condition, object))]):
            raise MissingCondition("conditional model needs a relative-energy condition")
        feats.append(sinusoidal(np.asarray(condition, float), config.n_freq))
    return np.concatenate(feats, axis=1)


def neighbor_list(system: AdslabSystem, cutoff: float):
    """Directed periodic edges ``(i, j, shift, vec, dist)`` with ``vec = x_j + shift·B − x_i``."""
    return periodic_neighbors(system.cell, system.positions, cutoff)


def build_batch(inputs: Sequence[ScoreModelInput], config: NetConfig, table: igso3.IgSo3Table,
                warned: Optional[set] = None) -> GraphBatch:
    """Graph batch of ``inputs``; species outside the vocabulary are warned about once per ``warned`` set."""
    vocab = {z: k + 1 for k, z in enumerate(config.species)}
    sidx, tags, ngraph = [], [], []
    recv, send, dist, unit = [], [], [], []
    ads_nodes, ads_rel, ads_graph = [], [], []
    unknown: set[int] = set()
    offset = 0
    for g, inp in enumerate(inputs):
        sys = inp.system
        n = len(sys)
        for z in sys.species:
            if int(z) not in vocab:
                unknown.add(int(z))
        sidx.append([vocab.get(int(z), UNKNOWN) for z in sys.species])
        tags.append(sys.tags)
        ngraph.append(np.full(n, g))
        i, j, _, vec, d = neighbor_list(sys, config.cutoff)
        recv.append(i + offset)
        send.append(j + offset)
        dist.append(d)
        unit.append(vec / d[:, None])
        mask = sys.adsorbate_mask
        ads = whole_adsorbate(sys)
        ads_nodes.append(np.nonzero(mask)[0] + offset)
        ads_rel.append(ads - ads.mean(axis=0))
        ads_graph.append(np.full(len(ads), g))
        offset += n
    if warned is not None:
        unknown -= warned
        warned |= unknown
    if unknown:
        warnings.warn(f"species {sorted(unknown)} not in the model vocabulary; using the shared unknown embedding",
                      RuntimeWarning, stacklevel=3)
    tr_sigma = np.array([inp.tr_sigma for inp in inputs], float)
    rot_sigma = np.array([inp.rot_sigma for inp in inputs], float)
    cond = condition_features(config, tr_sigma, rot_sigma,
                              [inp.condition for inp in inputs] if config.conditional else None)
    rot_scale = np.sqrt(table.score_norm_sq_at(rot_sigma))

    def t(a, dtype=torch.float64):
        return torch.as_tensor(np.concatenate(a) if isinstance(a, list) else a, dtype=dtype)

    return GraphBatch(
        species_idx=t(sidx, torch.long),
        tags=t(tags, torch.long),
        node_graph=t(ngraph, torch.long),
        receivers=t(recv, torch.long),
        senders=t(send, torch.long),
        dist=t(dist),
        unit=t(unit),
        ads_nodes=t(ads_nodes, torch.long),
        ads_rel=t(ads_rel),
        ads_graph=t(ads_graph, torch.long),
        cond=t(cond),
        tr_sigma=t(tr_sigma),
        rot_scale=t(rot_scale),
        n_graphs=len(inputs),
        unknown_species=sorted(unknown),
    )


# -- parameters -----------------------------------------------------------------


def param_shapes(config: NetConfig) -> dict[str, tuple]:
    H, R = config.hidden_dim, config.n_rbf
    shapes = {
        "species_embed": (len(config.species) + 1, H),
        "tag_embed": (3, H),
        "cond_w": (config.cond_dim, H),
        "cond_b": (H,),
    }
    for r in range(config.n_message_rounds):
        shapes.update({
            f"msg{r}_filter_w": (R, H),
            f"msg{r}_filter_b": (H,),
            f"msg{r}_src_w": (H, H),
            f"msg{r}_upd_w1": (2 * H, H),
            f"msg{r}_upd_b1": (H,),
            f"msg{r}_upd_w2": (H, H),
        })
    shapes.update({
        "head_recv_w": (H, H),
        "head_send_w": (H, H),
        "head_rbf_w": (R, H),
        "head_b": (H,),
        "head_out_w": (H, 3),  # translation, rotation (direct), rotation (torque)
    })
    return shapes


def init_params(config: NetConfig, seed: int = 0) -> dict[str, torch.Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            arr = np.zeros(shape)
        elif name.endswith("_embed"):
            arr = rng.normal(0.0, 1.0, shape)
        else:
            scale = 1.0 / np.sqrt(shape[0])
            if name == "head_out_w":
                scale *= 0.1
            arr = rng.normal(0.0, scale, shape)
        params[name] = torch.tensor(arr, requires_grad=True)
    return params


# -- forward ----------------------------------------------------------------------


def _rbf(config: NetConfig, d: torch.Tensor) -> torch.Tensor:
    centers = torch.linspace(0.0, config.cutoff, config.n_rbf, dtype=DTYPE)
    gamma = (config.n_rbf / config.cutoff) ** 2
    envelope = 0.5 * (torch.cos(np.pi * d / config.cutoff) + 1.0)
    return torch.exp(-gamma * (d[:, None] - centers) ** 2) * envelope[:, None]


def forward_batch(params: dict, config: NetConfig, batch: GraphBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Translation (G, 2) and rotation (G, 3) scores for a graph batch."""
    act = torch.nn.functional.silu
    p = params
    rbf = _rbf(config, batch.dist)
    cond = batch.cond @ p["cond_w"] + p["cond_b"]
    h = p["species_embed"][batch.species_idx] + p["tag_embed"][batch.tags] + cond[batch.node_graph]
    n = h.shape[0]
    for r in range(config.n_message_rounds):
        filt = rbf @ p[f"msg{r}_filter_w"] + p[f"msg{r}_filter_b"]
        m = act(h @ p[f"msg{r}_src_w"])[batch.senders] * filt
        agg = torch.zeros(n, h.shape[1], dtype=DTYPE).index_add(0, batch.receivers, m) / config.aggregation_norm
        upd = act(torch.cat([h, agg], dim=1) @ p[f"msg{r}_upd_w1"] + p[f"msg{r}_upd_b1"])
        h = h + upd @ p[f"msg{r}_upd_w2"]

    is_ads = torch.zeros(n, dtype=torch.bool)
    is_ads[batch.ads_nodes] = True
    e = torch.nonzero(is_ads[batch.receivers]).squeeze(1)
    ri, si = batch.receivers[e], batch.senders[e]
    z = act((h @ p["head_recv_w"])[ri] + (h @ p["head_send_w"])[si] + rbf[e] @ p["head_rbf_w"] + p["head_b"])
    w = z @ p["head_out_w"]  # (E', 3)
    u = batch.unit[e]
    per_atom = torch.zeros(n, 3, 3, dtype=DTYPE).index_add(0, ri, w[:, :, None] * u[:, None, :])
    v = per_atom[batch.ads_nodes]  # (A, 3 heads, 3)
    rot_atom = v[:, 1] + torch.cross(batch.ads_rel, v[:, 2], dim=1)
    G = batch.n_graphs
    count = torch.zeros(G, dtype=DTYPE).index_add(0, batch.ads_graph, torch.ones(len(batch.ads_graph), dtype=DTYPE))
    tr = torch.zeros(G, 3, dtype=DTYPE).index_add(0, batch.ads_graph, v[:, 0]) / count[:, None]
    rot = torch.zeros(G, 3, dtype=DTYPE).index_add(0, batch.ads_graph, rot_atom) / count[:, None]
    # Heads predict sigma-normalised scores; undo the normalisation here.
    tr_vec = tr[:, :2] / batch.tr_sigma[:, None]
    rot_vec = rot * batch.rot_scale[:, None]
    return tr_vec, rot_vec


def dsm_loss_torch(tr_vec, rot_vec, batch: GraphBatch, target: ScoreTarget, weights=None) -> torch.Tensor:
    """Torch twin of :func:`adsplace.noise.dsm_loss` (same weighting, batch mean)."""
    tt = torch.as_tensor(target.tr_score, dtype=DTYPE)
    rt = torch.as_tensor(target.rot_score, dtype=DTYPE)
    if tr_vec.shape != tt.shape or rot_vec.shape != rt.shape:
        raise ContractViolation(f"prediction shapes {tuple(tr_vec.shape)}/{tuple(rot_vec.shape)} do not match targets")
    s = torch.as_tensor(np.asarray(target.tr_sigma, float))
    lam = 1.0 / batch.rot_scale**2
    per = s**2 * ((tr_vec - tt) ** 2).sum(1) + lam * ((rot_vec - rt) ** 2).sum(1)
    if weights is None:
        return per.mean()
    w = torch.as_tensor(np.asarray(weights, float))
    return (w * per).sum() / w.sum()


# -- model wrapper ------------------------------------------------------------------


class ReferenceScoreNet:
    """Reference score model: parameters, architecture config and the IGSO(3) table it uses."""

    def __init__(self, config: NetConfig, table: igso3.IgSo3Table, params: Optional[dict] = None, seed: int = 0):
        self.config = config
        self.table = table
        self.params = params if params is not None else init_params(config, seed)
        self.seed = seed
        self._warned_species: set[int] = set()
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in self.params or tuple(self.params[name].shape) != shape:
                raise ContractViolation(f"parameter {name} missing or has wrong shape")
        for name, t in self.params.items():
            if not torch.isfinite(t).all():
                raise ContractViolation(f"parameter {name} has non-finite entries")

    @property
    def conditional(self) -> bool:
        return self.config.conditional

    def parameters(self) -> list[torch.Tensor]:
        return [self.params[k] for k in param_shapes(self.config)]

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        return [(k, self.params[k]) for k in param_shapes(self.config)]

    def n_parameters(self) -> int:
        return int(sum(p.numel() for p in self.params.values()))

    def batch(self, inputs: Sequence[ScoreModelInput]) -> GraphBatch:
        return build_batch(inputs, self.config, self.table, self._warned_species)

    def forward(self, batch: GraphBatch):
        return forward_batch(self.params, self.config, batch)

    def predict(self, inputs: Sequence[ScoreModelInput]) -> list[ScoreModelOutput]:
        with torch.no_grad():
            tr, rot = self.forward(self.batch(inputs))
        tr, rot = tr.numpy(), rot.numpy()
        return [ScoreModelOutput(tr[k].copy(), rot[k].copy()) for k in range(len(inputs))]

    def predict_one(self, inp: ScoreModelInput) -> ScoreModelOutput:
        return self.predict([inp])[0]

    def loss(self, inputs, target: ScoreTarget, weights=None) -> torch.Tensor:
        batch = self.batch(inputs)
        tr, rot = self.forward(batch)
        return dsm_loss_torch(tr, rot, batch, target, weights)

    def loss_and_gradient(self, inputs, target: ScoreTarget, weights=None, batch_id=None):
        """Loss value and exact gradients (dict name -> array) of the DSM loss."""
        for p in self.parameters():
            p.grad = None
        loss = self.loss(inputs, target, weights)
        if not torch.isfinite(loss):
            raise GradientOverflow(f"non-finite loss {loss.item()}", batch_id=batch_id)
        loss.backward()
        grads = {}
        for name in param_shapes(self.config):
            g = self.params[name].grad
            g = torch.zeros_like(self.params[name]) if g is None else g
            if not torch.isfinite(g).all():
                raise GradientOverflow(f"non-finite gradient in {name}", batch_id=batch_id)
            grads[name] = g.detach().numpy().copy()
        return float(loss.item()), grads

    # -- persistence --

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param/{k}": v.detach().numpy().copy() for k, v in self.params.items()}

    def metadata(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "net": asdict(self.config),
            "table": self.table.build_params(),
            "seed": self.seed,
        }

    def save(self, path, extra_meta: Optional[dict] = None, extra_arrays: Optional[dict] = None) -> None:
        meta = self.metadata()
        if extra_meta:
            meta.update(extra_meta)
        arrays = self.state_arrays()
        if extra_arrays:
            arrays.update(extra_arrays)
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_model(path, table: Optional[igso3.IgSo3Table] = None, table_cache=None) -> ReferenceScoreNet:
    meta, arrays = read_checkpoint(path)
    net = dict(meta["net"])
    net["species"] = tuple(net["species"])
    config = NetConfig(**net)
    if table is None:
        table = igso3.load_or_build_table(table_cache, **meta["table"])
    elif table.build_params() != meta["table"]:
        raise ContractViolation("IGSO(3) table does not match the checkpoint")
    params = {k[len("param/"):]: torch.tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("param/")}
    return ReferenceScoreNet(config, table, params, seed=meta.get("seed", 0))
