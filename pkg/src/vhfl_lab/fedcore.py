"""Training engines: vertical-horizontal FL, FedAvg-style HFL, and cloud baselines.

One global epoch of the vertical-horizontal mode runs
select -> broadcast centrally processed features -> parallel local
updates (which also record gradients with respect to the central
features) -> optional lossy-channel filtering -> weight aggregation ->
one central model step -> evaluation. The HFL baseline is the same loop
without the central model; the cloud baselines train on pooled data,
with or without the global features.

All randomness flows through named substreams of (seed, tag, ...), so a
trace is a pure function of (config, dataset): client updates may run in
any order without changing results.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nnet
from .datagen import ClientShard, FederationDataset, GlobalStore, batches
from .netqueue import ChannelModel, apply_channel
from .rng import substream

MODES = ("vhfl", "hfl", "cloud", "cloud_local")
COMBINES = ("concat", "additive")
AGGREGATORS = ("renormalized", "paper_unbiased")


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule: constant c, or c / (t + t0) decaying in the slot t."""

    kind: str
    c: float
    t0: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "inverse"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.c < 0.0:
            raise ValueError(f"schedule coefficient must be >= 0, got {self.c}")
        if self.kind == "inverse" and self.t0 <= 0.0:
            raise ValueError(f"inverse schedule needs t0 > 0, got {self.t0}")

    def value(self, t: int) -> float:
        if self.kind == "constant":
            return self.c
        return self.c / (t + self.t0)

    def max_value(self) -> float:
        if self.kind == "constant":
            return self.c
        return self.c / self.t0


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int
    k: int
    local_epochs: int
    batch_size: int
    global_epochs: int
    eta: Schedule
    eta0: Schedule
    seed: int
    selection: str = "uniform_without_replacement"
    combine: str = "concat"
    aggregator: str = "renormalized"
    w0_hidden: tuple[int, ...] = (16,)
    u0_dim: int = 4
    local_hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    l_est: float = 1.0
    center_frozen: bool = False
    deadline_channel: ChannelModel | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.k <= self.n_clients:
            raise ValueError(f"need 1 <= k <= n_clients, got k={self.k}, n={self.n_clients}")
        if self.local_epochs < 1 or self.global_epochs < 1:
            raise ValueError("local_epochs and global_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.selection != "uniform_without_replacement":
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if self.combine not in COMBINES:
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.activation not in nnet.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.u0_dim < 1:
            raise ValueError(f"u0_dim must be >= 1, got {self.u0_dim}")
        if self.l_est <= 0.0:
            raise ValueError(f"l_est must be positive, got {self.l_est}")
        for name, sched in (("eta", self.eta), ("eta0", self.eta0)):
            top = sched.max_value()
            if not 0.0 < top <= 1.0 / self.l_est:
                raise ValueError(
                    f"{name} values must lie in (0, {1.0 / self.l_est:g}], peak is {top:g}"
                )
        object.__setattr__(self, "w0_hidden", tuple(int(h) for h in self.w0_hidden))
        object.__setattr__(self, "local_hidden", tuple(int(h) for h in self.local_hidden))


@dataclass
class CenterState:
    """Center-side state: global model w0 (None for local-only modes) and federal model."""

    w0: nnet.DenseNet | None
    wbar: nnet.DenseNet
    combine: str = "concat"
    epoch: int = 0
    central_updates: int = 0


@dataclass(frozen=True)
class ClientState:
    client_id: int
    shard: ClientShard


@dataclass(frozen=True)
class Upload:
    client_id: int
    q: float
    net: nnet.DenseNet
    vgrads: dict[int, np.ndarray]


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    train_mse: float
    test_mse: float
    test_error_ratio: float
    k_received: int
    wall_clock: float


@dataclass
class TrainingTrace:
    mode: str
    seed: int
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if not (np.isfinite(row.train_mse) and np.isfinite(row.test_mse)):
            raise ValueError(f"non-finite loss at epoch {row.epoch}")
        self.rows.append(row)

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]

    def column(self, name: str) -> list[float]:
        return [getattr(row, name) for row in self.rows]

    def to_csv(self, path: str | Path, config_hash: str | None = None) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "mode", "train_mse", "test_mse", "test_error_ratio", "k_received", "seed"]
            )
            for row in self.rows:
                writer.writerow(
                    [
                        row.epoch,
                        self.mode,
                        repr(row.train_mse),
                        repr(row.test_mse),
                        repr(row.test_error_ratio),
                        row.k_received,
                        self.seed,
                    ]
                )


def select_clients(n_clients: int, k: int, seed: int, t_g: int) -> tuple[int, ...]:
    """K distinct client ids, uniform without replacement, keyed by (seed, t_g)."""
    if not 1 <= k <= n_clients:
        raise ValueError(f"need 1 <= k <= n_clients, got k={k}, n={n_clients}")
    rng = substream(seed, "select", t_g)
    picks = rng.choice(n_clients, size=k, replace=False)
    return tuple(sorted(int(i) for i in picks))


def center_broadcast(
    center: CenterState,
    global_store: GlobalStore,
    clients: Sequence[ClientShard],
) -> dict[int, dict[int, np.ndarray]]:
    """Per-client tables id -> centrally processed feature row u0 = w0(x0)."""
    if center.w0 is None:
        raise ValueError("center has no global model to broadcast from")
    tables: dict[int, dict[int, np.ndarray]] = {}
    for shard in clients:
        rows = global_store.rows(shard.ids)
        u0, _ = nnet.forward(center.w0, rows)
        tables[shard.client_id] = {int(i): u0[k] for k, i in enumerate(shard.ids)}
    return tables


def _combined_step(
    net: nnet.DenseNet,
    batch_x: np.ndarray,
    batch_side: np.ndarray | None,
    batch_y: np.ndarray,
    combine: str,
) -> tuple[float, nnet.Gradients, np.ndarray | None]:
    """One forward/backward; returns loss, local-model grads, and the gradient
    of the batch-mean loss with respect to the side (centrally processed) rows."""
    if batch_side is None:
        out, trace = nnet.forward(net, batch_x)
        loss, lgrad = nnet.mse_loss(out, batch_y)
        return loss, nnet.backward(net, trace, lgrad), None
    if combine == "concat":
        inp = np.hstack([batch_side, batch_x])
        out, trace = nnet.forward(net, inp)
        loss, lgrad = nnet.mse_loss(out, batch_y)
        grads = nnet.backward(net, trace, lgrad, want_input_grad=True)
        side_grad = grads.input_grad[:, : batch_side.shape[1]]
        return loss, grads, side_grad
    out, trace = nnet.forward(net, batch_x)
    loss, lgrad = nnet.mse_loss(batch_side + out, batch_y)
    grads = nnet.backward(net, trace, lgrad)
    return loss, grads, lgrad


def client_update(
    client: ClientState,
    wbar: nnet.DenseNet,
    u0_table: Mapping[int, np.ndarray] | None,
    local_epochs: int,
    batch_size: int,
    eta: Schedule,
    *,
    combine: str = "concat",
    batch_rng: np.random.Generator | int = 0,
    slot_offset: int = 0,
) -> tuple[nnet.DenseNet, dict[int, np.ndarray]]:
    """Local training from the downloaded federal weights.

    The client initializes at ``wbar``, splits its samples (with the
    fixed centrally processed rows) into batches once, then runs
    ``local_epochs`` passes of mini-batch SGD. For every sample the
    gradient of the client loss with respect to its central row is
    recorded each epoch and averaged over epochs; the result is returned
    alongside the updated weights.
    """
    shard = client.shard
    if shard.n == 0:
        raise ValueError(f"client {client.client_id} has no samples")
    if local_epochs < 1:
        raise ValueError("local_epochs must be >= 1")
    net = wbar
    batch_list = batches(shard, u0_table, batch_size, batch_rng)
    vgrad_sum: dict[int, np.ndarray] = {}
    for epoch in range(local_epochs):
        for b in batch_list:
            loss, grads, side_grad = _combined_step(net, b.x_local, b.x_side, b.y, combine)
            if side_grad is not None:
                # rescale batch-mean rows to client-mean units
                scale = b.ids.shape[0] / shard.n
                for k, sample_id in enumerate(b.ids):
                    key = int(sample_id)
                    row = side_grad[k] * scale
                    if key in vgrad_sum:
                        vgrad_sum[key] = vgrad_sum[key] + row
                    else:
                        vgrad_sum[key] = row
            eta_t = eta.value(slot_offset + epoch)
            if eta_t > 0.0:
                net = nnet.sgd_step(net, grads, eta_t)
    vgrads = {key: row / local_epochs for key, row in vgrad_sum.items()}
    return net, vgrads


def aggregate_weights(
    uploads: Sequence[tuple[float, nnet.DenseNet]],
    k: int,
    n_clients: int | None = None,
    aggregator: str = "renormalized",
) -> nnet.DenseNet:
    """Layer-wise weighted sum of the received nets.

    ``renormalized`` rescales the received coefficients to sum to 1 (a
    convex combination even when uploads were lost); ``paper_unbiased``
    uses (n_clients / k) * q_j, the unbiased estimator.
    """
    if not uploads:
        raise ValueError("cannot aggregate an empty upload set")
    if aggregator == "renormalized":
        total = sum(q for q, _ in uploads)
        coeffs = [q / total for q, _ in uploads]
    elif aggregator == "paper_unbiased":
        if n_clients is None:
            raise ValueError("paper_unbiased aggregation needs n_clients")
        coeffs = [(n_clients / k) * q for q, _ in uploads]
    else:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    reference = uploads[0][1]
    layers = []
    for idx, ref_layer in enumerate(reference.layers):
        w = np.zeros_like(ref_layer.weights)
        b = np.zeros_like(ref_layer.bias)
        for coeff, (_, net) in zip(coeffs, uploads):
            layer = net.layers[idx]
            if layer.weights.shape != ref_layer.weights.shape:
                raise ValueError("uploaded nets have mismatched shapes")
            w += coeff * layer.weights
            b += coeff * layer.bias
        layers.append(nnet.DenseLayer(weights=w, bias=b, activation=ref_layer.activation))
    return nnet.DenseNet(layers=tuple(layers))


def central_update(
    w0: nnet.DenseNet,
    vgrad_tables: Sequence[Mapping[int, np.ndarray]],
    global_store: GlobalStore,
    eta0: float,
) -> nnet.DenseNet:
    """One SGD step on the global model from the returned per-sample gradients.

    The stacked rows are back-propagated through w0 as the output
    gradient, which sums the chain rule over every received sample.
    """
    merged: dict[int, np.ndarray] = {}
    for table in vgrad_tables:
        for sample_id, row in table.items():
            if sample_id in merged:
                raise ValueError(f"duplicate vertical-gradient row for id {sample_id}")
            merged[int(sample_id)] = row
    if not merged:
        return w0
    ids = sorted(merged)
    rows = np.vstack([merged[i] for i in ids])
    x0 = global_store.rows(ids)
    out, trace = nnet.forward(w0, x0)
    if rows.shape != out.shape:
        raise ValueError(f"vertical gradients have shape {rows.shape}, expected {out.shape}")
    grads = nnet.backward(w0, trace, rows)
    if eta0 <= 0.0:
        return w0
    return nnet.sgd_step(w0, grads, eta0)


def predict(
    center: CenterState,
    x_global: np.ndarray | None,
    x_local: np.ndarray,
) -> np.ndarray:
    """Model output y_hat for a batch; global features are required iff w0 exists."""
    if center.w0 is None:
        out, _ = nnet.forward(center.wbar, x_local)
        return out
    if x_global is None:
        raise ValueError("global features required for a center with a global model")
    u0, _ = nnet.forward(center.w0, x_global)
    if center.combine == "concat":
        out, _ = nnet.forward(center.wbar, np.hstack([u0, x_local]))
        return out
    out, _ = nnet.forward(center.wbar, x_local)
    return u0 + out


def evaluate(
    center: CenterState,
    shards: Sequence[ClientShard],
    global_store: GlobalStore | None,
) -> tuple[float, float]:
    """Pooled (mse, error_ratio) of the center's predictor over the given shards."""
    sq_sum = 0.0
    ratio_sum = 0.0
    count = 0
    for shard in shards:
        x_global = global_store.rows(shard.ids) if center.w0 is not None else None
        if center.w0 is not None and global_store is None:
            raise ValueError("global store required in a global-aware mode")
        pred = predict(center, x_global, shard.x_local)
        diff = pred - shard.y
        sq_sum += float(np.sum(diff * diff))
        norms = np.linalg.norm(diff, axis=1)
        scales = np.maximum(np.linalg.norm(shard.y, axis=1), 1e-8)
        ratio_sum += float(np.sum(norms / scales))
        count += shard.n
    if count == 0:
        raise ValueError("no samples to evaluate")
    return sq_sum / count, ratio_sum / count


def weighted_train_loss(
    center: CenterState,
    shards: Sequence[ClientShard],
    global_store: GlobalStore | None,
) -> float:
    """Global objective: q-weighted sum of per-client mean losses."""
    total = 0.0
    for shard in shards:
        x_global = global_store.rows(shard.ids) if center.w0 is not None else None
        pred = predict(center, x_global, shard.x_local)
        diff = pred - shard.y
        total += shard.q * float(np.sum(diff * diff)) / shard.n
    return total


def _build_wbar(config: FederationConfig, d_local: int, d_label: int) -> nnet.DenseNet:
    local_in = config.u0_dim + d_local if config.combine == "concat" else d_local
    dims = [local_in, *config.local_hidden, d_label]
    acts = [config.activation] * len(config.local_hidden) + ["identity"]
    return nnet.random_net(dims, acts, substream(config.seed, "init", "wbar"))


def _build_w0(config: FederationConfig, d_global: int) -> nnet.DenseNet:
    dims = [d_global, *config.w0_hidden, config.u0_dim]
    acts = [config.activation] * len(config.w0_hidden) + ["identity"]
    return nnet.random_net(dims, acts, substream(config.seed, "init", "w0"))


def _check_dims(config: FederationConfig, dataset: FederationDataset) -> None:
    if dataset.n_clients != config.n_clients:
        raise ValueError(
            f"config expects {config.n_clients} clients, dataset has {dataset.n_clients}"
        )
    if config.combine == "additive" and config.u0_dim != dataset.d_label:
        raise ValueError(
            f"additive combining needs u0_dim == d_label, got {config.u0_dim} != {dataset.d_label}"
        )


def run_vhfl(
    config: FederationConfig,
    dataset: FederationDataset,
    center: CenterState | None = None,
) -> tuple[CenterState, TrainingTrace]:
    """Train with vertical gradient exchange for ``global_epochs`` rounds."""
    _check_dims(config, dataset)
    store = dataset.global_store
    if center is None:
        center = CenterState(
            w0=_build_w0(config, dataset.d_global),
            wbar=_build_wbar(config, dataset.d_local, dataset.d_label),
            combine=config.combine,
        )
    if center.w0 is None:
        raise ValueError("vertical-horizontal training needs a global model")
    shards = {shard.client_id: shard for shard in dataset.clients}
    trace = TrainingTrace(mode="vhfl", seed=config.seed)
    for t_g in range(config.global_epochs):
        started = time.perf_counter()
        selected = select_clients(config.n_clients, config.k, config.seed, t_g)
        tables = center_broadcast(center, store, [shards[j] for j in selected])
        uploads = []
        for j in selected:
            net_j, vgrads = client_update(
                ClientState(j, shards[j]),
                center.wbar,
                tables[j],
                config.local_epochs,
                config.batch_size,
                config.eta,
                combine=config.combine,
                batch_rng=substream(config.seed, "batches", j, t_g),
                slot_offset=t_g * config.local_epochs,
            )
            uploads.append(Upload(client_id=j, q=shards[j].q, net=net_j, vgrads=vgrads))
        delivered = _deliver(config.deadline_channel, uploads, t_g)
        if delivered:
            center.wbar = aggregate_weights(
                [(u.q, u.net) for u in delivered],
                config.k,
                config.n_clients,
                config.aggregator,
            )
            if not config.center_frozen:
                center.w0 = central_update(
                    center.w0,
                    [u.vgrads for u in delivered],
                    store,
                    config.eta0.value(t_g),
                )
                center.central_updates += 1
        center.epoch += 1
        train = weighted_train_loss(center, dataset.clients, store)
        test_mse, err = evaluate(center, dataset.test_clients, store)
        trace.append(
            TraceRow(t_g, train, test_mse, err, len(delivered), time.perf_counter() - started)
        )
    return center, trace


def _deliver(
    channel: ChannelModel | None,
    uploads: list[Upload],
    t_g: int,
) -> list[Upload]:
    if channel is None:
        return uploads
    delivered_ids = set(apply_channel(channel, [u.client_id for u in uploads], epoch=t_g))
    return [u for u in uploads if u.client_id in delivered_ids]


def run_hfl(
    config: FederationConfig,
    dataset: FederationDataset,
    center: CenterState | None = None,
) -> tuple[CenterState, TrainingTrace]:
    """FedAvg baseline: local SGD on local features plus periodic aggregation."""
    _check_dims_hfl(config, dataset)
    if center is None:
        dims = [dataset.d_local, *config.local_hidden, dataset.d_label]
        acts = [config.activation] * len(config.local_hidden) + ["identity"]
        wbar = nnet.random_net(dims, acts, substream(config.seed, "init", "wbar"))
        center = CenterState(w0=None, wbar=wbar, combine=config.combine)
    shards = {shard.client_id: shard for shard in dataset.clients}
    trace = TrainingTrace(mode="hfl", seed=config.seed)
    for t_g in range(config.global_epochs):
        started = time.perf_counter()
        selected = select_clients(config.n_clients, config.k, config.seed, t_g)
        uploads = []
        for j in selected:
            net_j, _ = client_update(
                ClientState(j, shards[j]),
                center.wbar,
                None,
                config.local_epochs,
                config.batch_size,
                config.eta,
                combine=config.combine,
                batch_rng=substream(config.seed, "batches", j, t_g),
                slot_offset=t_g * config.local_epochs,
            )
            uploads.append(Upload(client_id=j, q=shards[j].q, net=net_j, vgrads={}))
        delivered = _deliver(config.deadline_channel, uploads, t_g)
        if delivered:
            center.wbar = aggregate_weights(
                [(u.q, u.net) for u in delivered],
                config.k,
                config.n_clients,
                config.aggregator,
            )
        center.epoch += 1
        train = weighted_train_loss(center, dataset.clients, None)
        test_mse, err = evaluate(center, dataset.test_clients, None)
        trace.append(
            TraceRow(t_g, train, test_mse, err, len(delivered), time.perf_counter() - started)
        )
    return center, trace


def _check_dims_hfl(config: FederationConfig, dataset: FederationDataset) -> None:
    if dataset.n_clients != config.n_clients:
        raise ValueError(
            f"config expects {config.n_clients} clients, dataset has {dataset.n_clients}"
        )


def _pooled(dataset: FederationDataset) -> ClientShard:
    ids = np.concatenate([shard.ids for shard in dataset.clients])
    x = np.vstack([shard.x_local for shard in dataset.clients])
    y = np.vstack([shard.y for shard in dataset.clients])
    return ClientShard(client_id=0, ids=ids, x_local=x, y=y, q=1.0)


def run_cloud(
    config: FederationConfig,
    dataset: FederationDataset,
    use_global: bool,
) -> tuple[CenterState, TrainingTrace]:
    """Centralized SGD on the pooled training split.

    With ``use_global`` the composed model (global net feeding the local
    net) is trained end-to-end; otherwise only local features are used.
    """
    _check_dims_hfl(config, dataset)
    store = dataset.global_store
    pooled = _pooled(dataset)
    if use_global:
        _check_dims(config, dataset)
        center = CenterState(
            w0=_build_w0(config, dataset.d_global),
            wbar=_build_wbar(config, dataset.d_local, dataset.d_label),
            combine=config.combine,
        )
    else:
        dims = [dataset.d_local, *config.local_hidden, dataset.d_label]
        acts = [config.activation] * len(config.local_hidden) + ["identity"]
        center = CenterState(
            w0=None,
            wbar=nnet.random_net(dims, acts, substream(config.seed, "init", "wbar")),
            combine=config.combine,
        )
    mode = "cloud" if use_global else "cloud_local"
    trace = TrainingTrace(mode=mode, seed=config.seed)
    for t_g in range(config.global_epochs):
        started = time.perf_counter()
        batch_rng = substream(config.seed, "batches", 0, t_g)
        batch_list = batches(pooled, None, config.batch_size, batch_rng)
        for epoch in range(config.local_epochs):
            eta_t = config.eta.value(t_g * config.local_epochs + epoch)
            for b in batch_list:
                if use_global:
                    x0 = store.rows(b.ids)
                    u0, trace0 = nnet.forward(center.w0, x0)
                    loss, grads, side_grad = _combined_step(
                        center.wbar, b.x_local, u0, b.y, config.combine
                    )
                    g0 = nnet.backward(center.w0, trace0, side_grad)
                    if eta_t > 0.0:
                        center.wbar = nnet.sgd_step(center.wbar, grads, eta_t)
                        center.w0 = nnet.sgd_step(center.w0, g0, eta_t)
                else:
                    loss, grads, _ = _combined_step(center.wbar, b.x_local, None, b.y, config.combine)
                    if eta_t > 0.0:
                        center.wbar = nnet.sgd_step(center.wbar, grads, eta_t)
        center.epoch += 1
        train = weighted_train_loss(center, dataset.clients, store if use_global else None)
        test_mse, err = evaluate(center, dataset.test_clients, store if use_global else None)
        trace.append(TraceRow(t_g, train, test_mse, err, 0, time.perf_counter() - started))
    return center, trace
