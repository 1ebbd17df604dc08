"""Full training runs: the list-decodable protocol and its baselines.

Three loops share one client/data setup:

* :func:`run_lidfl` — the list protocol. Each round the server samples one
  client and one listed model uniformly, receives an (honest or crafted)
  update, extends the list with the updated model, lets every client vote,
  and prunes the least-voted candidate.
* :func:`run_lidfl_agg` — the aggregated variant: every round all clients
  send updates and the candidate update is one random output of the rknn or
  meb grouping rule.
* :func:`run_baseline` — the conventional single-model loop with a robust
  aggregator (fedavg / cwm / gm / norm).

Everything is driven by labelled streams derived from the master seed, so a
run is a pure function of its config.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as atk
from .aggregators import AggregatorKind, agg_cwm, agg_gm, agg_mean, agg_meb, agg_norm, agg_rknn
from .attacks import AttackKind, OmniscientView, build_omniscient_view
from .core import RngStream, derive_stream
from .data import DatasetConfig, flip_labels, generate, partition
from .models import Batch, ModelSpec, per_example_correct, per_example_nll
from .trainer import LocalTrainConfig, local_update, local_update_state
from .voting import ValidationOracle, byzantine_vote, noisy_estimate, tally_and_prune, tally_votes

UPDATE_SOURCES = ("single-client", "aggregated")
BASELINE_AGGREGATORS = ("fedavg", "cwm", "gm", "norm")
LIST_AGGREGATORS = ("rknn", "meb")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of one simulated run."""

    model: ModelSpec
    dataset: DatasetConfig
    local: LocalTrainConfig = LocalTrainConfig()
    n_clients: int = 35
    honest_fraction: float = 0.4
    list_size: int = 2
    rounds: int = 1500
    attack: AttackKind = AttackKind()
    vote_attack: str = "worst"
    oracle: ValidationOracle = ValidationOracle()
    aggregator: AggregatorKind | None = None
    update_source: str = "single-client"
    split_ratios: tuple[float, float, float] = (4.0, 1.0, 1.0)
    balance: str = "balanced"
    master_seed: int = 0
    data_seed: int | None = None  # fix the dataset across protocol seeds
    repeats: int = 1
    eval_every: int = 10
    momentum_persist: bool = False
    init_scale: float = 0.0

    @property
    def honest_count(self) -> int:
        k = self.honest_fraction * self.n_clients
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"honest_fraction*n_clients = {k} is not an integer")
        return int(round(k))

    @property
    def min_list_size(self) -> int:
        return math.floor(1.0 / self.honest_fraction)

    def validate(self) -> bool:
        """Check the config; returns True when the list-size guarantee holds."""
        if self.update_source not in UPDATE_SOURCES:
            raise ValueError(f"unknown update source {self.update_source!r}")
        if self.n_clients < 1 or not 0 < self.honest_fraction <= 1:
            raise ValueError("invalid client counts")
        if self.list_size < 1 or self.rounds < 0 or self.eval_every < 1 or self.repeats < 1:
            raise ValueError("invalid protocol sizes")
        if self.vote_attack not in ("worst", "random"):
            raise ValueError(f"unknown voting attack {self.vote_attack!r}")
        _ = self.honest_count
        ok = self.list_size >= self.min_list_size
        if not ok:
            warnings.warn(
                f"list size {self.list_size} is below floor(1/gamma) = {self.min_list_size}; "
                "the survival guarantee does not apply"
            )
        return ok


@dataclass(frozen=True)
class ClientSpec:
    """One simulated client: identity, honesty, and its three data splits."""

    id: int
    honest: bool
    train: Batch
    val: Batch
    test: Batch


@dataclass(frozen=True)
class RoundRecord:
    """Observables of one protocol round.

    ``candidate_losses`` are the q+1 candidates' validation losses averaged
    over honest clients; ``best_*`` describe the surviving list: the model
    minimizing the honest global (training) loss, the minimum validation
    loss, and the maximum per-model mean test accuracy (re-evaluated every
    ``eval_every`` rounds and carried forward in between).
    """

    round: int
    client_id: int
    byzantine: bool
    model_index: int
    candidate_losses: tuple[float, ...]
    tally: tuple[int, ...]
    pruned_index: int
    best_index: int
    best_val_loss: float
    best_global_loss: float
    best_test_acc: float


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    records: list[RoundRecord]
    final_list: list[np.ndarray]
    regime_warning: bool = False


class _EvalPool:
    """Concatenated per-client data for fast mean-of-means evaluation."""

    def __init__(self, batches: list[Batch]):
        self.x = np.concatenate([b.x for b in batches])
        self.y = np.concatenate([b.y for b in batches])
        sizes = np.array([len(b) for b in batches])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.sizes = sizes

    def client_losses(self, spec: ModelSpec, w: np.ndarray) -> np.ndarray:
        nll = per_example_nll(spec, w, self.x, self.y)
        per_client = np.add.reduceat(nll, self.offsets) / self.sizes
        return per_client + 0.5 * spec.l2 * float(np.dot(w, w))

    def mean_loss(self, spec: ModelSpec, w: np.ndarray) -> float:
        return float(self.client_losses(spec, w).mean())

    def client_accuracies(self, spec: ModelSpec, w: np.ndarray) -> np.ndarray:
        correct = per_example_correct(spec, w, self.x, self.y)
        return np.add.reduceat(correct, self.offsets) / self.sizes

    def mean_accuracy(self, spec: ModelSpec, w: np.ndarray) -> float:
        return float(self.client_accuracies(spec, w).mean())


@dataclass
class _Engine:
    cfg: RunConfig
    stream: RngStream
    clients: list[ClientSpec]
    honest: list[ClientSpec]
    byz: list[ClientSpec]
    val_pool: _EvalPool
    train_pool: _EvalPool
    test_pool: _EvalPool
    w_init: np.ndarray
    momenta: dict = field(default_factory=dict)


def setup_clients(cfg: RunConfig) -> list[ClientSpec]:
    """Generate the dataset and build the client roster for a config.

    Clients 0..k-1 are honest. Under the label-flip attack the Byzantine
    clients' training splits are poisoned at construction; validation and
    test data are never touched. When ``data_seed`` is set the dataset and
    its partition depend on it alone, so repeats across master seeds share
    one dataset and differ only in protocol randomness.
    """
    data_stream = derive_stream(
        cfg.master_seed if cfg.data_seed is None else cfg.data_seed, "run"
    )
    full = generate(cfg.dataset, data_stream.child("data"))
    part = partition(len(full), cfg.n_clients, cfg.split_ratios, cfg.balance, data_stream.child("partition"))
    k = cfg.honest_count
    n_classes = cfg.model.n_classes
    clients = []
    for j in range(cfg.n_clients):
        train = full.subset(part.train[j])
        honest = j < k
        if not honest and cfg.attack.kind == "lf":
            train = flip_labels(train, n_classes)
        clients.append(
            ClientSpec(j, honest, train, full.subset(part.val[j]), full.subset(part.test[j]))
        )
    return clients


def initial_model(cfg: RunConfig) -> np.ndarray:
    """The shared starting parameters (zeros unless init_scale > 0)."""
    stream = derive_stream(cfg.master_seed, "run")
    return cfg.model.init_params(
        stream.child("init").generator() if cfg.init_scale > 0 else None, cfg.init_scale
    )


def _setup(cfg: RunConfig) -> _Engine:
    clients = setup_clients(cfg)
    honest = [c for c in clients if c.honest]
    byz = [c for c in clients if not c.honest]
    stream = derive_stream(cfg.master_seed, "run")
    w_init = initial_model(cfg)
    return _Engine(
        cfg=cfg,
        stream=stream,
        clients=clients,
        honest=honest,
        byz=byz,
        val_pool=_EvalPool([c.val for c in honest]),
        train_pool=_EvalPool([c.train for c in honest]),
        test_pool=_EvalPool([c.test for c in clients]),
        w_init=w_init,
    )


def global_loss(st: _Engine, w: np.ndarray) -> float:
    """Honest global objective: mean over honest clients of their mean loss."""
    return st.train_pool.mean_loss(st.cfg.model, w)


def _honest_update(st: _Engine, t: int, client: ClientSpec, w: np.ndarray) -> np.ndarray:
    rng = st.stream.child(f"local/t{t}/c{client.id}")
    if st.cfg.momentum_persist:
        u, v = local_update_state(st.cfg.model, w, client.train, st.cfg.local, rng, st.momenta.get(client.id))
        st.momenta[client.id] = v
        return u
    return local_update(st.cfg.model, w, client.train, st.cfg.local, rng)


def _build_view(st: _Engine, t: int, w: np.ndarray) -> OmniscientView:
    return build_omniscient_view(
        w, [c.train for c in st.honest], st.cfg.model, st.cfg.local, st.stream.child(f"view/t{t}")
    )


def _byz_update(st: _Engine, t: int, client: ClientSpec, w: np.ndarray, view: OmniscientView | None) -> np.ndarray:
    """Crafted update of one Byzantine client (``view`` for epr/lie/omn)."""
    cfg = st.cfg
    kind = cfg.attack.kind
    if kind in ("none", "lf"):
        # honest behaviour; under lf the client's training data is poisoned
        return local_update(cfg.model, w, client.train, cfg.local, st.stream.child(f"byz/t{t}/c{client.id}"))
    if kind == "sf":
        true_u = local_update(cfg.model, w, client.train, cfg.local, st.stream.child(f"byz/t{t}/c{client.id}"))
        return atk.craft_sf(true_u)
    if kind == "gauss":
        true_u = local_update(cfg.model, w, client.train, cfg.local, st.stream.child(f"byz/t{t}/c{client.id}"))
        return atk.craft_gauss(view, true_u, st.stream.child(f"gauss/t{t}/c{client.id}"))
    if view is None:
        raise ValueError(f"attack {kind!r} requires an omniscient view")
    k, m = st.cfg.honest_count, st.cfg.n_clients
    if kind == "epr":
        return atk.craft_epr(view, k, m)
    if kind == "lie":
        return atk.craft_lie(view, cfg.attack.z)
    if kind == "omn":
        return atk.craft_omn(view, k, m, -cfg.attack.omn_scale * view.mean)
    raise ValueError(f"unhandled attack kind {kind!r}")


def _collect_votes(st: _Engine, t: int, candidates: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """All m votes on the candidate list; returns (votes, candidate losses).

    Honest clients vote the argmin of their oracle estimates. Byzantine
    voters see the honest-average losses and vote per the configured attack.
    """
    cfg = st.cfg
    n_cand = len(candidates)
    loss_matrix = np.stack(
        [st.val_pool.client_losses(cfg.model, w) for w in candidates], axis=1
    )  # (honest clients, candidates)
    cand_losses = loss_matrix.mean(axis=0)
    votes = np.empty(cfg.n_clients, dtype=np.int64)
    if cfg.oracle.mode == "local-split":
        honest_votes = np.argmin(loss_matrix, axis=1)
    else:
        gen = st.stream.child(f"votenoise/t{t}").generator()
        honest_votes = np.empty(len(st.honest), dtype=np.int64)
        for i in range(len(st.honest)):
            est = [
                noisy_estimate(cand_losses[c], cfg.oracle.eta, cfg.oracle.p, cfg.oracle.loss_bound, gen)
                for c in range(n_cand)
            ]
            honest_votes[i] = int(np.argmin(est))
    for i, c in enumerate(st.honest):
        votes[c.id] = honest_votes[i]
    if st.byz:
        gen = st.stream.child(f"byzvote/t{t}").generator()
        for c in st.byz:
            votes[c.id] = byzantine_vote(cfg.vote_attack, cand_losses, n_cand - 1, gen)
    return votes, cand_losses


def _best_metrics(st: _Engine, model_list: list[np.ndarray], t: int, last_acc: float) -> tuple[int, float, float, float]:
    cfg = st.cfg
    val_losses = [st.val_pool.mean_loss(cfg.model, w) for w in model_list]
    global_losses = [global_loss(st, w) for w in model_list]
    best_idx = int(np.argmin(global_losses))
    acc = last_acc
    if t % cfg.eval_every == 0 or t == cfg.rounds - 1:
        acc = max(st.test_pool.mean_accuracy(cfg.model, w) for w in model_list)
    return best_idx, float(min(val_losses)), float(global_losses[best_idx]), float(acc)


def run_lidfl(cfg: RunConfig) -> RunResult:
    """Run the list-decodable protocol for cfg.rounds rounds."""
    if cfg.update_source != "single-client":
        raise ValueError("run_lidfl requires update_source = 'single-client'")
    ok = cfg.validate()
    st = _setup(cfg)
    q = cfg.list_size
    model_list = [st.w_init.copy() for _ in range(q)]
    sampler = st.stream.child("sampling").generator()
    needs_view = cfg.attack.kind in atk.VIEW_ATTACKS
    records: list[RoundRecord] = []
    last_acc = 0.0
    for t in range(cfg.rounds):
        j = int(sampler.integers(cfg.n_clients))
        midx = int(sampler.integers(q))
        client = st.clients[j]
        w = model_list[midx]
        if client.honest:
            u = _honest_update(st, t, client, w)
        else:
            view = _build_view(st, t, w) if needs_view else None
            u = _byz_update(st, t, client, w, view)
        candidates = model_list + [w + u]
        votes, cand_losses = _collect_votes(st, t, candidates)
        model_list, pruned = tally_and_prune(candidates, votes)
        tally = tally_votes(votes, q + 1)
        best_idx, best_val, best_global, last_acc = _best_metrics(st, model_list, t, last_acc)
        records.append(
            RoundRecord(
                round=t,
                client_id=j,
                byzantine=not client.honest,
                model_index=midx,
                candidate_losses=tuple(float(x) for x in cand_losses),
                tally=tuple(int(x) for x in tally),
                pruned_index=pruned,
                best_index=best_idx,
                best_val_loss=best_val,
                best_global_loss=best_global,
                best_test_acc=last_acc,
            )
        )
    return RunResult(cfg, records, model_list, regime_warning=not ok)


def _all_client_updates(st: _Engine, t: int, w: np.ndarray) -> list[np.ndarray]:
    """Updates from every client, honest then crafted, ordered by id.

    The omniscient attacks reuse the honest updates actually computed this
    round: in the all-clients modes the attacker's view coincides with them.
    """
    honest_updates = {c.id: _honest_update(st, t, c, w) for c in st.honest}
    view = None
    if st.byz and st.cfg.attack.kind in atk.VIEW_ATTACKS:
        view = OmniscientView.from_updates([honest_updates[c.id] for c in st.honest])
    updates = []
    for c in st.clients:
        if c.honest:
            updates.append(honest_updates[c.id])
        else:
            updates.append(_byz_update(st, t, c, w, view))
    return updates


def run_lidfl_agg(cfg: RunConfig) -> RunResult:
    """List-decodable protocol with an rknn/meb aggregated candidate update."""
    if cfg.update_source != "aggregated":
        raise ValueError("run_lidfl_agg requires update_source = 'aggregated'")
    if cfg.aggregator is None or cfg.aggregator.kind not in LIST_AGGREGATORS:
        raise ValueError("run_lidfl_agg requires an rknn or meb aggregator")
    ok = cfg.validate()
    st = _setup(cfg)
    agg = cfg.aggregator
    if agg.k is None:
        agg = AggregatorKind(agg.kind, agg.gm_iters, agg.norm_tau, cfg.honest_count)
    agg_fn = agg_rknn if agg.kind == "rknn" else agg_meb
    q = cfg.list_size
    model_list = [st.w_init.copy() for _ in range(q)]
    sampler = st.stream.child("sampling").generator()
    records: list[RoundRecord] = []
    last_acc = 0.0
    for t in range(cfg.rounds):
        midx = int(sampler.integers(q))
        w = model_list[midx]
        updates = _all_client_updates(st, t, w)
        u, _ = agg_fn(updates, agg.k, st.stream.child(f"agg/t{t}"))
        candidates = model_list + [w + u]
        votes, cand_losses = _collect_votes(st, t, candidates)
        model_list, pruned = tally_and_prune(candidates, votes)
        tally = tally_votes(votes, q + 1)
        best_idx, best_val, best_global, last_acc = _best_metrics(st, model_list, t, last_acc)
        records.append(
            RoundRecord(
                round=t,
                client_id=-1,
                byzantine=False,
                model_index=midx,
                candidate_losses=tuple(float(x) for x in cand_losses),
                tally=tuple(int(x) for x in tally),
                pruned_index=pruned,
                best_index=best_idx,
                best_val_loss=best_val,
                best_global_loss=best_global,
                best_test_acc=last_acc,
            )
        )
    return RunResult(cfg, records, model_list, regime_warning=not ok)


def run_baseline(cfg: RunConfig) -> RunResult:
    """Conventional robust-FL loop: one global model, one aggregator."""
    if cfg.aggregator is None or cfg.aggregator.kind not in BASELINE_AGGREGATORS:
        raise ValueError("run_baseline requires a fedavg/cwm/gm/norm aggregator")
    cfg.validate()
    st = _setup(cfg)
    w = st.w_init.copy()
    records: list[RoundRecord] = []
    last_acc = 0.0
    for t in range(cfg.rounds):
        updates = _all_client_updates(st, t, w)
        if cfg.aggregator.kind == "fedavg":
            u = agg_mean(updates)
        elif cfg.aggregator.kind == "cwm":
            u = agg_cwm(updates)
        elif cfg.aggregator.kind == "gm":
            u = agg_gm(updates, cfg.aggregator.gm_iters)
        else:
            u = agg_norm(updates, cfg.aggregator.norm_tau)
        w = w + u
        val_loss = st.val_pool.mean_loss(cfg.model, w)
        f_w = global_loss(st, w)
        if t % cfg.eval_every == 0 or t == cfg.rounds - 1:
            last_acc = st.test_pool.mean_accuracy(cfg.model, w)
        records.append(
            RoundRecord(
                round=t,
                client_id=-1,
                byzantine=False,
                model_index=0,
                candidate_losses=(float(val_loss),),
                tally=(),
                pruned_index=-1,
                best_index=0,
                best_val_loss=float(val_loss),
                best_global_loss=float(f_w),
                best_test_acc=float(last_acc),
            )
        )
    return RunResult(cfg, records, [w])


def evaluate_list(spec: ModelSpec, model_list: list[np.ndarray], clients: list[ClientSpec]) -> tuple[np.ndarray, int]:
    """Mean test accuracy of every listed model, and the argmax index."""
    if not model_list:
        raise ValueError("empty model list")
    pool = _EvalPool([c.test for c in clients])
    accs = np.array([pool.mean_accuracy(spec, w) for w in model_list])
    return accs, int(np.argmax(accs))


CSV_SCHEMA = "lidfl-rounds-v1"
CSV_HEADER = "round,sampled_client,byzantine,model_added_loss,pruned_index,best_val_loss,best_test_acc"


def records_to_csv(records: list[RoundRecord]) -> str:
    """Render the per-round series in the versioned CSV schema.

    ``model_added_loss`` is the honest-average validation loss of the
    candidate added this round. Floats use shortest round-trip formatting,
    so a repeated run serializes byte-identically.
    """
    lines = [f"# schema={CSV_SCHEMA}", CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.round},{r.client_id},{int(r.byzantine)},{r.candidate_losses[-1]!r},"
            f"{r.pruned_index},{r.best_val_loss!r},{r.best_test_acc!r}"
        )
    return "\n".join(lines) + "\n"


def replicate(cfg: RunConfig, seeds: list[int]) -> list[RunConfig]:
    """Copies of one config at different master seeds."""
    return [replace(cfg, master_seed=s) for s in seeds]
