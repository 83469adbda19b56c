"""Optimizer, training strategies, checkpoints and early stopping.

A strategy expands into a :class:`TrainPlan`: an ordered list of phases,
each with an epoch budget, a set of frozen modules and the loss terms that
form its objective.  ``run_plan`` walks the phases, recalibrating the loss
weights whenever the active term set changes.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import batches
from .losses import TERMS, LossReport, LossWeights, calibrate_weights, combine
from .nets import oracle_salience

log = logging.getLogger(__name__)

STRATEGIES = ("sfsf", "sftsft", "sfsft", "wup", "sfsftf")
F0_STACK = frozenset({"salience", "assignment"})
SYNTH_STACK = frozenset({"encoder", "decoder"})


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction and per-parameter step counts.

    Parameters that are not trainable are neither updated nor given
    moments; :meth:`prune` drops moments of parameters that became frozen.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.steps = {}, {}, {}

    def step(self, named_params):
        for name, p in named_params:
            if not p.requires_grad:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.steps[name] = 0
            v = self.v[name]
            self.steps[name] += 1
            t = self.steps[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)
            p.zero_grad()

    def prune(self, keep):
        for name in list(self.m):
            if name not in keep:
                del self.m[name], self.v[name], self.steps[name]


def grad_norm(named_params):
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for _, p in named_params)))


def clip_gradients(named_params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = grad_norm(named_params)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in named_params:
            if p._grad is not None:
                p._grad *= scale
    return norm


# ---------------------------------------------------------------- plans


@dataclass
class Phase:
    name: str
    epochs: int
    frozen: frozenset
    active: tuple

    def to_dict(self):
        return {"name": self.name, "epochs": self.epochs, "frozen": sorted(self.frozen),
                "active": list(self.active)}


@dataclass
class TrainPlan:
    strategy: str
    phases: list
    max_epochs: int = 200
    patience: int = 30

    @classmethod
    def for_strategy(cls, strategy, tcfg):
        """Expand a strategy name using the epoch budgets of ``tcfg``."""
        s = strategy.lower().replace("_", "")
        total = tcfg.max_epochs
        if s == "sfsf":
            phases = [Phase("sfsf", total, F0_STACK, ("l_rec",))]
        elif s == "sftsft":
            phases = [Phase("sftsft", total, frozenset(), TERMS)]
        elif s == "sfsft":
            phases = [Phase("sfsft", total, frozenset({"salience"}), TERMS)]
        elif s == "wup":
            p1, p2 = tcfg.wup_epochs
            if p1 + p2 >= total:
                raise ValueError("warm-up budgets leave no epochs for joint training")
            phases = [Phase("assign", p1, frozenset({"salience"}) | SYNTH_STACK, ("l1", "l2", "l3")),
                      Phase("synth", p2, F0_STACK, ("l_rec",)),
                      Phase("joint", total - p1 - p2, frozenset(), TERMS)]
        elif s == "sfsftf":
            first = tcfg.sfsft_epochs
            if first >= total:
                raise ValueError("sfsft budget leaves no epochs for fine-tuning")
            phases = [Phase("sfsft", first, frozenset({"salience"}), TERMS),
                      Phase("finetune", total - first, frozenset(), TERMS)]
        else:
            raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
        return cls(s, phases, total, tcfg.patience)

    def budgets(self):
        return [p.epochs for p in self.phases]


class EarlyStopping:
    """Signals a stop after ``patience`` epochs without a new best value."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, value, epoch):
        """Record ``value``; returns (improved, stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DSEP"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict
    config: dict
    adam: dict = field(default_factory=dict)      # name -> (m, v)
    adam_steps: dict = field(default_factory=dict)
    position: dict = field(default_factory=dict)  # phase index / epoch
    weights: dict = field(default_factory=dict)
    seed: int = 0

    def tensors(self):
        out = dict(self.params)
        for name, (m, v) in self.adam.items():
            out[f"adam.m/{name}"] = m
            out[f"adam.v/{name}"] = v
        return out

    def meta(self):
        return {"config": self.config, "adam_steps": self.adam_steps, "position": self.position,
                "weights": self.weights, "seed": self.seed}


def save_checkpoint(path, ckpt):
    tensors = ckpt.tensors()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    meta = json.dumps(ckpt.meta(), sort_keys=True, separators=(",", ":")).encode()
    chunks.append(struct.pack("<I", len(meta)) + meta)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        name = blob[pos + 4:pos + 4 + n].decode()
        pos += 4 + n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    (n,) = struct.unpack_from("<I", blob, pos)
    meta = json.loads(blob[pos + 4:pos + 4 + n].decode())
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    adam = {}
    for k, v in tensors.items():
        if k.startswith("adam.m/"):
            name = k[len("adam.m/"):]
            adam[name] = (v, tensors[f"adam.v/{name}"])
    return Checkpoint(params, meta["config"], adam, meta["adam_steps"], meta["position"],
                      meta["weights"], meta["seed"])


def make_checkpoint(model, adam=None, position=None, weights=None, seed=0):
    adam_state, steps = {}, {}
    if adam is not None:
        adam_state = {k: (adam.m[k], adam.v[k]) for k in adam.m}
        steps = dict(adam.steps)
    w = asdict(weights) if isinstance(weights, LossWeights) else dict(weights or {})
    return Checkpoint({k: v.copy() for k, v in model.store.state().items()}, model.cfg.to_dict(),
                      adam_state, steps, dict(position or {}), w, seed)


def model_from_checkpoint(ckpt, overrides=None):
    from .config import Config
    from .model import Separator

    cfg = Config.from_dict(ckpt.config)
    if overrides:
        cfg.update(overrides)
    model = Separator(cfg)
    model.store.load_state(ckpt.params)
    return model


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    history: list
    phase_ledger: list
    weights: list
    nan_skips: int
    checkpoint: Checkpoint
    seconds: float


class Trainer:
    def __init__(self, model, train_set, valid_set=None, log_path=None, ckpt_path=None, echo=None):
        if not train_set:
            raise TrainingError("empty training corpus")
        self.model = model
        self.cfg = model.cfg
        self.train_set = list(train_set)
        self.valid_set = list(valid_set) if valid_set else list(train_set)
        if not valid_set:
            log.warning("no validation split; early stopping on the training set")
        t = self.cfg.train
        self.adam = Adam(t.lr, t.beta1, t.beta2, t.adam_eps)
        self.rng = np.random.default_rng(t.seed)
        self.log_path = log_path
        self.ckpt_path = ckpt_path
        self.echo = echo
        self.nan_skips = 0
        self._batch_size = min(t.batch_size, len(self.train_set))
        if self._batch_size < t.batch_size:
            log.warning("batch size %d exceeds the %d training excerpts", t.batch_size, len(self.train_set))
        self.weights = LossWeights(self.cfg.loss.alpha, self.cfg.loss.beta, self.cfg.loss.gamma, "fixed")
        self._log_fh = open(log_path, "w") if log_path else None

    def _write(self, record):
        line = json.dumps(record, sort_keys=True)
        if self._log_fh:
            self._log_fh.write(line + "\n")
            self._log_fh.flush()
        if self.echo and record.get("event") == "epoch":
            self.echo(line)

    def _feats(self, items):
        return [self.model.features(e) for e in items]

    def calibrate(self, phase):
        batch = batches(self.train_set, self._batch_size, None, True)[0]
        out = self.model.forward(self._feats(batch), TERMS, keys=[e.id for e in batch])
        report = LossReport.assemble({k: v.data for k, v in out.terms.items()}, self.weights, out.per_scale)
        if self.cfg.loss.balancing == "auto_calibrated":
            self.weights = calibrate_weights(report)
        self._write({"event": "calibrate", "phase": phase.name, **asdict(self.weights),
                     "report": json.loads(report.to_json())})
        return report

    def objective(self, terms, active):
        return combine(terms, self.weights, active)

    def evaluate(self, items, active):
        total, count = 0.0, 0
        for chunk in batches(items, self.cfg.train.batch_size, None, drop_last=False):
            out = self.model.forward(self._feats(chunk), active, keys=[e.id for e in chunk])
            total += float(self.objective(out.terms, active).data) * len(chunk)
            count += len(chunk)
        return total / count

    def train_step(self, batch, active, epoch, phase, step):
        out = self.model.forward(self._feats(batch), active, keys=[e.id for e in batch])
        loss = self.objective(out.terms, active)
        ad.backward(loss)
        params = self.model.store.trainable()
        norm = grad_norm(params)
        record = {"event": "step", "epoch": epoch, "phase": phase.name, "step": step,
                  **{k: float(v.data) for k, v in out.terms.items()},
                  "objective": float(loss.data), "grad_norm": norm}
        if not (np.isfinite(norm) and np.isfinite(loss.data)):
            self.model.store.zero_grad()
            self.nan_skips += 1
            record["skipped"] = True
            self._write(record)
            log.warning("non-finite gradient at epoch %d step %d (%d/%d)", epoch, step,
                        self.nan_skips, self.cfg.train.nan_budget)
            if self.nan_skips > self.cfg.train.nan_budget:
                if self.ckpt_path and self._last_good is not None:
                    save_checkpoint(self.ckpt_path, self._last_good)
                raise TrainingError("NaN budget exceeded")
            return record
        clip_gradients(params, self.cfg.train.clip_norm)
        self.adam.step(params)
        self.model.store.zero_grad()
        self._write(record)
        return record

    def run(self, plan):
        start = time.perf_counter()
        model = self.model
        history, ledger, weight_log = [], [], []
        epoch = 0
        prev_active = None
        self._last_good = make_checkpoint(model, self.adam, {"phase": 0, "epoch": 0}, self.weights,
                                          self.cfg.train.seed)
        best_ckpt = self._last_good
        for index, phase in enumerate(plan.phases):
            budget = min(phase.epochs, plan.max_epochs - epoch)
            ledger.append({"phase": phase.name, "budget": phase.epochs, "epochs": 0})
            if budget <= 0:
                continue
            model.store.set_frozen(phase.frozen)
            model.clear_caches()
            self.adam.prune({n for n, _ in model.store.trainable()})
            if set(phase.active) != prev_active:
                self.calibrate(phase)
                prev_active = set(phase.active)
            weight_log.append({"phase": phase.name, **asdict(self.weights)})
            stopper = EarlyStopping(plan.patience)
            best_state = {k: v.copy() for k, v in model.store.state().items()}
            for local in range(budget):
                train_vals = []
                for step, batch in enumerate(batches(self.train_set, self._batch_size, self.rng)):
                    rec = self.train_step(batch, phase.active, epoch, phase, step)
                    if not rec.get("skipped"):
                        train_vals.append(rec)
                val = self.evaluate(self.valid_set, phase.active)
                improved, stop = stopper.update(val, epoch)
                row = {"event": "epoch", "epoch": epoch, "phase": phase.name, "lr": self.adam.lr,
                       "val_l_full": val, "improved": improved}
                for key in TERMS + ("objective",):
                    vals = [r[key] for r in train_vals if key in r]
                    row["l_full" if key == "objective" else key] = float(np.mean(vals)) if vals else None
                history.append(row)
                self._write(row)
                ledger[-1]["epochs"] += 1
                epoch += 1
                position = {"phase": index, "phase_name": phase.name, "epoch": epoch}
                self._last_good = make_checkpoint(model, self.adam, position, self.weights, self.cfg.train.seed)
                if improved:
                    best_state = {k: v.copy() for k, v in model.store.state().items()}
                    best_ckpt = self._last_good
                if stop:
                    ledger[-1]["stopped_early"] = True
                    self._write({"event": "early_stop", "phase": phase.name, "epoch": epoch - 1,
                                 "best_epoch": stopper.best_epoch})
                    break
            model.store.load_state(best_state)
        model.clear_caches()
        if self.ckpt_path:
            save_checkpoint(self.ckpt_path, best_ckpt)
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None
        return TrainResult(history, ledger, weight_log, self.nan_skips, best_ckpt, time.perf_counter() - start)


def run_plan(plan, model, train_set, valid_set=None, log_path=None, ckpt_path=None, echo=None):
    return Trainer(model, train_set, valid_set, log_path, ckpt_path, echo).run(plan)


# ---------------------------------------------------------------- pretraining


def bce_with_logits(z, y):
    """Mean binary cross-entropy, ``softplus(z) - y z`` in a stable form."""
    z = ad.as_value(z)
    y = np.asarray(y, dtype=z.dtype)
    return ad.mean(ad.relu(z) + ad.log(ad.exp(-ad.abs(z)) + 1.0, eps=0.0) - z * y)


def pretrain(model, corpus, steps=200, lr=1e-2, batch_size=8, crop=64, seed=0, modules=("assignment",),
             echo=None):
    """Supervised warm start of the F0 stack from ground-truth F0s.

    The assignment net learns per-voice oracle maps from the summed oracle
    map; the salience net (if listed) learns the summed map from the HCQT.
    Random ``crop``-frame windows keep the steps cheap.
    """
    cfg = model.cfg
    items = [e for e in corpus if e.f0_truth is not None]
    if not items:
        raise TrainingError("pretraining needs excerpts with F0 annotations")
    rng = np.random.default_rng(seed)
    adam = Adam(lr)
    sigma = cfg.salience.oracle_sigma
    targets = {e.id: oracle_salience(e.f0_truth, sigma, per_voice=True, freqs=model.freqs) for e in items}
    hcqts = {}
    if "salience" in modules:
        for e in items:
            hcqts[e.id] = model.hcqt_input(e.mixture.samples)
    model.store.set_frozen(set(model.store.modules) - set(modules))
    curve = []
    for step in range(steps):
        pick = rng.choice(len(items), size=min(batch_size, len(items)), replace=False)
        starts = [int(rng.integers(0, max(1, targets[items[i].id].shape[1] - crop))) for i in pick]
        tgt = np.stack([targets[items[i].id][:, s:s + crop] for i, s in zip(pick, starts)])
        loss = None
        if "assignment" in modules:
            sm = np.clip(tgt.sum(axis=1), 0, 1)
            loss = bce_with_logits(model.assignment.logits(sm), tgt)
        if "salience" in modules:
            x = np.stack([hcqts[items[i].id][:, s:s + crop] for i, s in zip(pick, starts)])
            term = bce_with_logits(model.salience_net.logits(x), np.clip(tgt.sum(axis=1), 0, 1))
            loss = term if loss is None else loss + term
        ad.backward(loss)
        params = model.store.trainable()
        clip_gradients(params, cfg.train.clip_norm)
        adam.step(params)
        curve.append(float(loss.data))
        if echo and (step % 50 == 0 or step == steps - 1):
            echo(f"pretrain step {step} loss {curve[-1]:.5f}")
    model.store.set_frozen(set())
    model.clear_caches()
    return curve
