"""Training procedures: supervised baseline, pre-training+fine-tuning, joint.

All three run per-modality (continuous classification / sequence labeling)
from a labeled+unlabeled split with one optimizer (momentum gradient
descent with a global gradient-norm clip).  Randomness is organized in
named streams keyed by (seed, stream, step), so a run checkpointed at any
step boundary resumes to bit-identical final parameters and metrics.

The joint objective per step is

    loss = supervised term (softmax CE or CRF NLL on a labeled batch)
           - unsup_weight * log p(x) surrogate on an unlabeled batch

where the surrogate gradient is the sampled likelihood gradient with SGLD
particles (continuous) or the NCE objective on the marginal sequence
potential (sequence).  With unsup_weight = 0 the trajectory is bit-for-bit
the supervised one.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import crf as crf_mod
from . import data as data_mod
from . import diffcore as dc
from . import ebm_core as ec
from . import metrics as metrics_mod
from . import nce as nce_mod
from . import samplers as samplers_mod
from .diffcore import GraphContext, ParamStore
from .potentials import ClassifierNet, MlpPotential, SeqEncoder, _length_groups, _register_affine

__all__ = [
    "SamplerConfig",
    "NceConfig",
    "TrainConfig",
    "TrainedModel",
    "train_supervised",
    "train_pretrain_finetune",
    "train_joint",
    "evaluate",
    "LOG_COLUMNS",
]

LOG_COLUMNS = [
    "step",
    "loss_sup",
    "loss_unsup",
    "metric_train",
    "metric_dev",
    "diverged_particles",
    "wallclock_s",
]

# rng stream ids
_INIT, _LABELED, _UNLABELED, _SAMPLER, _NOISE, _GENERATOR, _REFRESH, _FT_LABELED = range(8)

EDGE_NAME = "crf/A"


@dataclass
class SamplerConfig:
    n_particles: int = 64
    steps_per_update: int = 20
    step_size: float = 0.01
    reinit_prob: float = 0.05
    noise_scale: float = 1.0
    use_generator: bool = True
    generator_latent_dim: int = 2
    generator_hidden: int = 32
    generator_lr: float = 0.02
    generator_latents: int = 64


@dataclass
class NceConfig:
    nu: int = 10
    dynamic: bool = True
    refresh_every: int = 500


@dataclass
class TrainConfig:
    modality: str = "continuous"  # continuous | sequence
    method: str = "supervised"  # supervised | pretrain_finetune | joint
    steps: int = 500
    pretrain_steps: int = 500
    lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 5.0
    batch_labeled: int = 16
    batch_unlabeled: int = 16
    unsup_weight: float = 0.5
    freeze_encoder: bool = True
    hidden: tuple[int, ...] = (32,)
    embed_dim: int = 16
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    nce: NceConfig = field(default_factory=NceConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "sampler" in d and isinstance(d["sampler"], dict):
            d["sampler"] = SamplerConfig(**d["sampler"])
        if "nce" in d and isinstance(d["nce"], dict):
            d["nce"] = NceConfig(**d["nce"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def _rng(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


@lru_cache(maxsize=512)
def _epoch_perm(seed: int, stream: int, epoch: int, n: int) -> tuple[int, ...]:
    return tuple(int(i) for i in _rng(seed, stream, epoch).permutation(n))


def batch_indices(n: int, batch: int, seed: int, stream: int, step: int) -> np.ndarray:
    """Round-robin batches over per-epoch shuffles; stateless in `step`."""
    b = min(batch, n)
    start = step * b
    out: list[int] = []
    while len(out) < b:
        epoch, off = divmod(start, n)
        perm = _epoch_perm(seed, stream, epoch, n)
        take = min(n - off, b - len(out))
        out.extend(perm[off : off + take])
        start += take
    return np.array(out, dtype=np.intp)


class MomentumOptimizer:
    """Plain momentum gradient descent with a global gradient-norm clip."""

    def __init__(self, store: ParamStore, names, lr: float, momentum: float, grad_clip: float):
        self.store = store
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {n: np.zeros_like(store.value(n)) for n in self.names}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        sq = 0.0
        for n in self.names:
            g = grads.get(n)
            if g is not None:
                sq += float((g * g).sum())
        norm = np.sqrt(sq)
        scale = 1.0 if norm <= self.grad_clip else self.grad_clip / norm
        for n in self.names:
            g = grads.get(n)
            if g is None:
                g = np.zeros_like(self.store.value(n))
            v = self.momentum * self.velocity[n] + scale * g
            self.velocity[n] = v
            self.store.set_value(n, self.store.value(n) - self.lr * v)


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


class ClassifierPredictor:
    def __init__(self, net: ClassifierNet):
        self.net = net

    def logits(self, points: np.ndarray) -> np.ndarray:
        return self.net.logits(points)

    def predict(self, points: np.ndarray) -> np.ndarray:
        return self.logits(points).argmax(axis=1)


class HeadOnHiddenPredictor:
    """softmax(W h + b) over the hidden layer of a pretrained potential body."""

    def __init__(self, phi: MlpPotential, head_prefix: str = "head"):
        self.phi = phi
        self.head_prefix = head_prefix

    def logits(self, points: np.ndarray) -> np.ndarray:
        ctx = GraphContext(self.phi.store)
        h = self.phi.hidden_node(ctx, dc.constant(np.atleast_2d(points)))
        out = dc.add(dc.matmul(h, ctx.param(f"{self.head_prefix}/W")),
                     ctx.param(f"{self.head_prefix}/b"))
        return out.value

    def predict(self, points: np.ndarray) -> np.ndarray:
        return self.logits(points).argmax(axis=1)


class SequenceLabeler:
    """Viterbi decoding over encoder logits and the edge matrix."""

    def __init__(self, encoder: SeqEncoder, edge_name: str = EDGE_NAME):
        self.encoder = encoder
        self.edge_name = edge_name

    def predict(self, seq) -> tuple[int, ...]:
        ch = crf_mod.ChainPotentials(
            node=self.encoder.logits(seq), edge=self.encoder.store.value(self.edge_name)
        )
        labels, _ = crf_mod.viterbi(ch)
        return tuple(int(t) for t in labels)

    def predict_all(self, seqs) -> list[tuple[int, ...]]:
        return [self.predict(s) for s in seqs]


# ---------------------------------------------------------------------------
# Trained model container
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    method: str
    modality: str
    config: TrainConfig
    store: ParamStore
    predictor: object
    meta: dict
    final_metrics: dict
    log_rows: list[dict]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dc.save_checkpoint(out / "model.ckpt", self.store)
        meta = {
            "method": self.method,
            "modality": self.modality,
            "config": self.config.to_dict(),
            "meta": self.meta,
            "final_metrics": self.final_metrics,
        }
        (out / "model.json").write_text(json.dumps(meta, indent=2))
        with open(out / "train_log.csv", "w") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for row in self.log_rows:
                fh.write(",".join(str(row[c]) for c in LOG_COLUMNS) + "\n")

    @classmethod
    def load(cls, out_dir) -> "TrainedModel":
        out = Path(out_dir)
        info = json.loads((out / "model.json").read_text())
        config = TrainConfig.from_dict(info["config"])
        loaded = dc.load_checkpoint(out / "model.ckpt")
        store, predictor = _rebuild_predictor(config, info["meta"], loaded)
        log_rows = []
        log_path = out / "train_log.csv"
        if log_path.exists():
            lines = log_path.read_text().splitlines()[1:]
            for ln in lines:
                vals = ln.split(",")
                log_rows.append(dict(zip(LOG_COLUMNS, vals)))
        return cls(
            info["method"], info["modality"], config, store, predictor,
            info["meta"], info["final_metrics"], log_rows,
        )


def _copy_params(dst: ParamStore, src: ParamStore) -> None:
    for name in dst.names():
        if name in src:
            dst.set_value(name, src.value(name))


def _rebuild_predictor(cfg: TrainConfig, meta: dict, loaded: ParamStore):
    rng = _rng(0, _INIT)  # placeholder init, immediately overwritten by loaded values
    if cfg.modality == "continuous":
        d, k = meta["input_dim"], meta["num_classes"]
        if meta["predictor"] == "classifier":
            net = ClassifierNet([d, *cfg.hidden, k], rng=rng)
            _copy_params(net.store, loaded)
            return net.store, ClassifierPredictor(net)
        phi = MlpPotential([d, *cfg.hidden], rng=rng)
        _register_affine(phi.store, "head", phi.hidden_dim, k, rng)
        _copy_params(phi.store, loaded)
        return phi.store, HeadOnHiddenPredictor(phi)
    v, k = meta["vocab_size"], meta["num_classes"]
    enc = SeqEncoder(v, cfg.embed_dim, num_labels=k, rng=rng)
    if EDGE_NAME not in enc.store:
        enc.store.add(EDGE_NAME, np.zeros((k, k)))
    if nce_mod.LOG_C_NAME in loaded and nce_mod.LOG_C_NAME not in enc.store:
        enc.store.add(nce_mod.LOG_C_NAME, np.zeros(()))
    _copy_params(enc.store, loaded)
    return enc.store, SequenceLabeler(enc)


# ---------------------------------------------------------------------------
# Loss graphs
# ---------------------------------------------------------------------------


def _ce_loss_and_grads(net: ClassifierNet, points, labels):
    def build(ctx):
        logits = net.logits_node(ctx, dc.constant(points))
        return dc.mean(dc.softmax_cross_entropy(logits, labels))

    loss, pgrads, _ = dc.value_and_grad(dc.Graph(build), net.store)
    return float(loss), pgrads


def _crf_nll_loss_and_grads(encoder: SeqEncoder, seqs, labels, edge_name: str = EDGE_NAME):
    n = len(seqs)

    def build(ctx):
        edge = ctx.param(edge_name)
        total = dc.constant(0.0)
        for idx in _length_groups(seqs):
            tokens = np.array([seqs[i] for i in idx], dtype=np.intp)
            ys = np.array([labels[i] for i in idx], dtype=np.intp)
            logits = encoder.logits_batch_node(ctx, tokens)
            nll = dc.sub(crf_mod.forward_logz_batch(logits, edge),
                         crf_mod.score_batch(logits, edge, ys))
            total = dc.add(total, dc.sum(nll))
        return dc.mul(1.0 / n, total)

    loss, pgrads, _ = dc.value_and_grad(dc.Graph(build), encoder.store)
    return float(loss), pgrads


def _combine(base: dict, extra: dict, scale: float) -> dict:
    out = dict(base)
    for name, g in extra.items():
        out[name] = out.get(name, 0.0) + scale * g
    return out


# ---------------------------------------------------------------------------
# Run state (checkpoint/resume)
# ---------------------------------------------------------------------------


class _RunState:
    """Everything a training loop needs to restart at a step boundary."""

    def __init__(self, store, optimizer, chain=None, gen=None, noise=None):
        self.store = store
        self.optimizer = optimizer
        self.chain = chain
        self.gen = gen
        self.noise = noise

    def save(self, path, step: int, stage: int = 0) -> None:
        snap = ParamStore()
        for name, v in self.store.items():
            snap.add(name, v)
        for name, v in self.optimizer.velocity.items():
            snap.add(f"opt/v/{name}", v)
        if self.chain is not None:
            snap.add("sampler/particles", self.chain.particles)
            snap.add("sampler/diverged", float(self.chain.diverged_count))
        if self.gen is not None:
            for name, v in self.gen.store.items():
                snap.add(f"auxgen/{name}", v)
        if self.noise is not None:
            snap.add("noise/bigram_counts", self.noise.bigram_counts)
            snap.add("noise/length_counts", self.noise.length_counts)
        snap.add("run/step", float(step))
        snap.add("run/stage", float(stage))
        dc.save_checkpoint(path, snap)

    def load(self, path) -> tuple[int, int]:
        snap = dc.load_checkpoint(path)
        for name in self.store.names():
            if name in snap:
                self.store.set_value(name, snap.value(name))
        for name in list(self.optimizer.velocity):
            key = f"opt/v/{name}"
            if key in snap:
                self.optimizer.velocity[name] = snap.value(key).copy()
        if self.chain is not None and "sampler/particles" in snap:
            self.chain.particles = snap.value("sampler/particles").copy()
            self.chain.diverged_count = int(snap.value("sampler/diverged"))
        if self.gen is not None:
            for name in self.gen.store.names():
                key = f"auxgen/{name}"
                if key in snap:
                    self.gen.store.set_value(name, snap.value(key))
        if self.noise is not None and "noise/bigram_counts" in snap:
            refreshed = nce_mod.NoiseLM(
                snap.value("noise/bigram_counts"),
                snap.value("noise/length_counts"),
                self.noise.vocab_size,
                log_c=self.noise.log_c,
            )
            self.noise = refreshed
        return int(snap.value("run/step")), int(snap.value("run/stage"))


# ---------------------------------------------------------------------------
# Shared loop helpers
# ---------------------------------------------------------------------------


def _labeled_arrays(labeled):
    if isinstance(labeled, data_mod.ContinuousDataset):
        return labeled.points, labeled.labels
    return labeled.sequences, labeled.labels


def _train_metric(predictor, dataset) -> float:
    try:
        return evaluate_predictor(predictor, dataset)["accuracy"]
    except ValueError:
        return float("nan")


def _log_row(rows, step, loss_sup, loss_unsup, metric_train, metric_dev, diverged, t0):
    rows.append(
        {
            "step": step,
            "loss_sup": loss_sup,
            "loss_unsup": loss_unsup,
            "metric_train": metric_train,
            "metric_dev": metric_dev,
            "diverged_particles": diverged,
            "wallclock_s": round(time.perf_counter() - t0, 3),
        }
    )


def _maybe_metrics(predictor, labeled, dev, step, cfg, final=False):
    if final or (cfg.log_every > 0 and step % cfg.log_every == 0):
        m_train = _train_metric(predictor, labeled)
        m_dev = _train_metric(predictor, dev) if dev is not None else float("nan")
        return m_train, m_dev, True
    return float("nan"), float("nan"), False


# ---------------------------------------------------------------------------
# Supervised / joint (shared loop)
# ---------------------------------------------------------------------------


def _sequence_space_bound(split) -> int:
    lens = [len(s) for s in split.labeled.sequences]
    if len(split.unlabeled) > 0:
        lens += [len(s) for s in split.unlabeled.sequences]
    return max(lens)


def _train_discriminative(split, cfg: TrainConfig, joint: bool, dev=None,
                          out_dir=None, resume=False) -> TrainedModel:
    if len(split.labeled) == 0:
        raise ValueError("empty labeled set")
    if joint and cfg.unsup_weight < 0:
        raise ValueError("unsup_weight must be >= 0")
    init_rng = _rng(cfg.seed, _INIT)
    xs, ys = _labeled_arrays(split.labeled)
    n_lab = len(split.labeled)
    use_unsup = joint and cfg.unsup_weight > 0 and len(split.unlabeled) > 0

    chain = gen = noise = None
    if cfg.modality == "continuous":
        d = split.labeled.points.shape[1]
        k = split.labeled.num_classes
        net = ClassifierNet([d, *cfg.hidden, k], rng=init_rng)
        jm = ec.JointEnergyModel.fixed(net, ec.ContinuousSpace(d))
        marginal = jm.marginal_model()
        predictor = ClassifierPredictor(net)
        store = net.store
        meta = {"input_dim": d, "num_classes": k, "predictor": "classifier"}
        if joint:
            chain = samplers_mod.ChainState.init(
                cfg.sampler.n_particles, d, init_rng,
                step_size=cfg.sampler.step_size,
                noise_scale=cfg.sampler.noise_scale,
                steps_per_update=cfg.sampler.steps_per_update,
                reinit_prob=cfg.sampler.reinit_prob,
            )
            if cfg.sampler.use_generator:
                gen = samplers_mod.AuxGenerator(
                    cfg.sampler.generator_latent_dim, d,
                    hidden=(cfg.sampler.generator_hidden,), rng=init_rng,
                )
    else:
        v = split.labeled.vocab_size
        k = split.labeled.num_labels
        enc = SeqEncoder(v, cfg.embed_dim, num_labels=k, rng=init_rng)
        max_len = _sequence_space_bound(split)
        jm = ec.JointEnergyModel.sequence(enc, ec.SequenceSpace(v, max_len))
        marginal = jm.marginal_model()
        predictor = SequenceLabeler(enc)
        store = enc.store
        meta = {"vocab_size": v, "num_classes": k, "predictor": "labeler"}
        if joint:
            nce_mod.ensure_log_c(store)
            if use_unsup:
                noise = nce_mod.noise_fit(split.unlabeled.sequences, v)

    optimizer = MomentumOptimizer(store, store.names(), cfg.lr, cfg.momentum, cfg.grad_clip)
    state = _RunState(store, optimizer, chain=chain, gen=gen, noise=noise)
    start_step = 0
    ckpt_path = Path(out_dir) / "state.ckpt" if out_dir is not None else None
    if resume and ckpt_path is not None and ckpt_path.exists():
        start_step, _ = state.load(ckpt_path)
        noise = state.noise

    rows: list[dict] = []
    t0 = time.perf_counter()
    for step in range(start_step, cfg.steps):
        idx = batch_indices(n_lab, cfg.batch_labeled, cfg.seed, _LABELED, step)
        if cfg.modality == "continuous":
            loss_sup, grads = _ce_loss_and_grads(jm.net, xs[idx], ys[idx])
        else:
            loss_sup, grads = _crf_nll_loss_and_grads(
                jm.encoder, [xs[i] for i in idx], [ys[i] for i in idx]
            )
        loss_unsup = float("nan")
        diverged = 0
        if use_unsup:
            uidx = batch_indices(len(split.unlabeled), cfg.batch_unlabeled,
                                 cfg.seed, _UNLABELED, step)
            if cfg.modality == "continuous":
                x_un = split.unlabeled.points[uidx]
                samples = samplers_mod.sample_batch(marginal, chain, gen,
                                                    _rng(cfg.seed, _SAMPLER, step))
                ml = ec.sampled_ml_gradient(marginal, x_un, samples)
                grads = _combine(grads, ml, -cfg.unsup_weight)
                u_data = marginal.potential_values(x_un).mean()
                u_samp = marginal.potential_values(samples).mean()
                loss_unsup = float(u_samp - u_data)
                diverged = chain.diverged_count
                if gen is not None:
                    samplers_mod.inclusive_generator_update(
                        gen, samples, cfg.sampler.generator_lr,
                        _rng(cfg.seed, _GENERATOR, step),
                        n_latent=cfg.sampler.generator_latents,
                    )
            else:
                if cfg.nce.dynamic and step > 0 and step % cfg.nce.refresh_every == 0:
                    noise = nce_mod.dnce_refresh(
                        noise, split.unlabeled.sequences, model=marginal,
                        rng=_rng(cfg.seed, _REFRESH, step),
                    )
                    state.noise = noise
                seq_un = [split.unlabeled.sequences[i] for i in uidx]
                noise_batch = noise.sample_batch(_rng(cfg.seed, _NOISE, step),
                                                 cfg.nce.nu * len(seq_un))
                loss_unsup, nce_grads = nce_mod.nce_loss(
                    marginal.potential, noise, seq_un, noise_batch, cfg.nce.nu
                )
                grads = _combine(grads, nce_grads, cfg.unsup_weight)
        optimizer.step(grads)
        m_train, m_dev, logged = _maybe_metrics(predictor, split.labeled, dev, step + 1, cfg,
                                                final=step + 1 == cfg.steps)
        if logged:
            _log_row(rows, step + 1, loss_sup, loss_unsup, m_train, m_dev, diverged, t0)
        if ckpt_path is not None and cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
            state.save(ckpt_path, step + 1)
    if ckpt_path is not None:
        state.save(ckpt_path, cfg.steps)

    final_metrics = {"train_accuracy": _train_metric(predictor, split.labeled)}
    method = "joint" if joint else "supervised"
    model = TrainedModel(method, cfg.modality, cfg, store, predictor, meta, final_metrics, rows)
    if out_dir is not None:
        model.save(out_dir)
    return model


def train_supervised(split, cfg: TrainConfig, dev=None, out_dir=None, resume=False) -> TrainedModel:
    """Labeled-data-only baseline; the unlabeled set is ignored."""
    cfg = replace(cfg, method="supervised")
    return _train_discriminative(split, cfg, joint=False, dev=dev, out_dir=out_dir, resume=resume)


def train_joint(split, cfg: TrainConfig, dev=None, out_dir=None, resume=False) -> TrainedModel:
    """Weighted conditional + marginal likelihood on one shared network."""
    cfg = replace(cfg, method="joint")
    return _train_discriminative(split, cfg, joint=True, dev=dev, out_dir=out_dir, resume=resume)


# ---------------------------------------------------------------------------
# Pre-training + fine-tuning
# ---------------------------------------------------------------------------


def train_pretrain_finetune(split, cfg: TrainConfig, dev=None, out_dir=None,
                            resume=False) -> TrainedModel:
    """Unsupervised EBM fit on unlabeled data, then a head on labeled data."""
    cfg = replace(cfg, method="pretrain_finetune")
    if len(split.unlabeled) == 0:
        raise ValueError("empty unlabeled set")
    if len(split.labeled) == 0:
        raise ValueError("empty labeled set")
    init_rng = _rng(cfg.seed, _INIT)
    xs, ys = _labeled_arrays(split.labeled)
    n_lab = len(split.labeled)

    chain = gen = noise = None
    if cfg.modality == "continuous":
        d = split.labeled.points.shape[1]
        k = split.labeled.num_classes
        phi = MlpPotential([d, *cfg.hidden], rng=init_rng)
        _register_affine(phi.store, "head", phi.hidden_dim, k, init_rng)
        store = phi.store
        model_unsup = ec.EnergyModel(phi, ec.ContinuousSpace(d))
        predictor = HeadOnHiddenPredictor(phi)
        meta = {"input_dim": d, "num_classes": k, "predictor": "head_on_hidden"}
        chain = samplers_mod.ChainState.init(
            cfg.sampler.n_particles, d, init_rng,
            step_size=cfg.sampler.step_size,
            noise_scale=cfg.sampler.noise_scale,
            steps_per_update=cfg.sampler.steps_per_update,
            reinit_prob=cfg.sampler.reinit_prob,
        )
        if cfg.sampler.use_generator:
            gen = samplers_mod.AuxGenerator(
                cfg.sampler.generator_latent_dim, d,
                hidden=(cfg.sampler.generator_hidden,), rng=init_rng,
            )
        pretrain_names = phi.param_names()
        head_names = ["head/W", "head/b"]
        frozen_body = phi.body_param_names() + [f"{phi.prefix}/w", f"{phi.prefix}/w_bias"]
    else:
        v = split.labeled.vocab_size
        k = split.labeled.num_labels
        enc = SeqEncoder(v, cfg.embed_dim, num_labels=k, rng=init_rng)
        store = enc.store
        store.add(EDGE_NAME, np.zeros((k, k)))
        nce_mod.ensure_log_c(store)
        model_unsup = ec.EnergyModel(enc, ec.SequenceSpace(v, _sequence_space_bound(split)))
        predictor = SequenceLabeler(enc)
        meta = {"vocab_size": v, "num_classes": k, "predictor": "labeler"}
        noise = nce_mod.noise_fit(split.unlabeled.sequences, v)
        pretrain_names = enc.encoder_param_names() + [nce_mod.LOG_C_NAME]
        head_names = enc.head_param_names() + [EDGE_NAME]
        frozen_body = enc.encoder_param_names()

    total_steps = cfg.pretrain_steps + cfg.steps
    optimizer = MomentumOptimizer(store, store.names(), cfg.lr, cfg.momentum, cfg.grad_clip)
    trainable_stage = {0: pretrain_names, 1: head_names if cfg.freeze_encoder else head_names + frozen_body}
    state = _RunState(store, optimizer, chain=chain, gen=gen, noise=noise)
    start_step = 0
    ckpt_path = Path(out_dir) / "state.ckpt" if out_dir is not None else None
    if resume and ckpt_path is not None and ckpt_path.exists():
        start_step, _ = state.load(ckpt_path)
        noise = state.noise

    rows: list[dict] = []
    t0 = time.perf_counter()
    stage_boundary = cfg.pretrain_steps
    for step in range(start_step, total_steps):
        stage = 0 if step < stage_boundary else 1
        if step == stage_boundary:
            # fine-tuning restarts the optimizer state on the head parameters
            optimizer.velocity = {n: np.zeros_like(store.value(n)) for n in optimizer.names}
        optimizer_names = trainable_stage[stage]
        loss_sup = float("nan")
        loss_unsup = float("nan")
        diverged = 0
        if stage == 0:
            uidx = batch_indices(len(split.unlabeled), cfg.batch_unlabeled,
                                 cfg.seed, _UNLABELED, step)
            if cfg.modality == "continuous":
                x_un = split.unlabeled.points[uidx]
                samples = samplers_mod.sample_batch(model_unsup, chain, gen,
                                                    _rng(cfg.seed, _SAMPLER, step))
                ml = ec.sampled_ml_gradient(model_unsup, x_un, samples)
                grads = {name: -g for name, g in ml.items()}
                u_data = model_unsup.potential_values(x_un).mean()
                u_samp = model_unsup.potential_values(samples).mean()
                loss_unsup = float(u_samp - u_data)
                diverged = chain.diverged_count
                if gen is not None:
                    samplers_mod.inclusive_generator_update(
                        gen, samples, cfg.sampler.generator_lr,
                        _rng(cfg.seed, _GENERATOR, step),
                        n_latent=cfg.sampler.generator_latents,
                    )
            else:
                if cfg.nce.dynamic and step > 0 and step % cfg.nce.refresh_every == 0:
                    noise = nce_mod.dnce_refresh(
                        noise, split.unlabeled.sequences, model=model_unsup,
                        rng=_rng(cfg.seed, _REFRESH, step),
                    )
                    state.noise = noise
                seq_un = [split.unlabeled.sequences[i] for i in uidx]
                noise_batch = noise.sample_batch(_rng(cfg.seed, _NOISE, step),
                                                 cfg.nce.nu * len(seq_un))
                loss_unsup, grads = nce_mod.nce_loss(
                    model_unsup.potential, noise, seq_un, noise_batch, cfg.nce.nu
                )
        else:
            ft_step = step - stage_boundary
            idx = batch_indices(n_lab, cfg.batch_labeled, cfg.seed, _FT_LABELED, ft_step)
            if cfg.modality == "continuous":
                loss_sup, grads = _head_ce_loss_and_grads(phi, xs[idx], ys[idx])
            else:
                loss_sup, grads = _crf_nll_loss_and_grads(
                    enc, [xs[i] for i in idx], [ys[i] for i in idx]
                )
        _optimizer_substep(optimizer, grads, optimizer_names)
        log_metrics = stage == 1
        m_train, m_dev, logged = _maybe_metrics(
            predictor if log_metrics else _NullPredictor(),
            split.labeled, dev, step + 1, cfg, final=step + 1 == total_steps,
        )
        if logged:
            _log_row(rows, step + 1, loss_sup, loss_unsup, m_train, m_dev, diverged, t0)
        if ckpt_path is not None and cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
            state.save(ckpt_path, step + 1, stage)
    if ckpt_path is not None:
        state.save(ckpt_path, total_steps, 1)

    final_metrics = {"train_accuracy": _train_metric(predictor, split.labeled)}
    model = TrainedModel("pretrain_finetune", cfg.modality, cfg, store, predictor, meta,
                         final_metrics, rows)
    if out_dir is not None:
        model.save(out_dir)
    return model


class _NullPredictor:
    def predict(self, points):
        raise ValueError("no classifier head during pre-training")

    def predict_all(self, seqs):
        raise ValueError("no classifier head during pre-training")


def _optimizer_substep(optimizer: MomentumOptimizer, grads: dict, names: list[str]) -> None:
    """Momentum step restricted to `names`; other parameters stay untouched."""
    saved = optimizer.names
    optimizer.names = names
    try:
        optimizer.step(grads)
    finally:
        optimizer.names = saved


def _head_ce_loss_and_grads(phi: MlpPotential, points, labels):
    def build(ctx):
        h = phi.hidden_node(ctx, dc.constant(points))
        logits = dc.add(dc.matmul(h, ctx.param("head/W")), ctx.param("head/b"))
        return dc.mean(dc.softmax_cross_entropy(logits, labels))

    loss, pgrads, _ = dc.value_and_grad(dc.Graph(build), phi.store)
    return float(loss), pgrads


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_predictor(predictor, dataset) -> dict[str, float]:
    if isinstance(dataset, data_mod.ContinuousDataset):
        if dataset.labels is None:
            raise ValueError("dataset has no labels to score against")
        preds = predictor.predict(dataset.points)
        return {"accuracy": metrics_mod.accuracy(preds, dataset.labels)}
    if dataset.labels is None:
        raise ValueError("dataset has no labels to score against")
    preds = predictor.predict_all(dataset.sequences)
    out = {"accuracy": metrics_mod.token_accuracy(preds, dataset.labels)}
    names = dataset.label_names
    if names and metrics_mod.is_bio_label_set(names):
        gold = [tuple(names[t] for t in y) for y in dataset.labels]
        hyp = [tuple(names[t] for t in y) for y in preds]
        _, _, f1 = metrics_mod.span_f1(gold, hyp)
        out["span_f1"] = f1
    return out


def evaluate(model: TrainedModel, test_set) -> dict[str, float]:
    """Accuracy for continuous data; token accuracy plus BIO span F1 for sequences."""
    if model.modality == "continuous":
        if not isinstance(test_set, data_mod.ContinuousDataset):
            raise ValueError("modality/test-set mismatch")
        if test_set.num_classes != model.meta["num_classes"]:
            raise ValueError("label-set mismatch between model and test set")
    else:
        if not isinstance(test_set, data_mod.SequenceDataset):
            raise ValueError("modality/test-set mismatch")
        if test_set.num_labels != model.meta["num_classes"]:
            raise ValueError("label-set mismatch between model and test set")
    return evaluate_predictor(model.predictor, test_set)
