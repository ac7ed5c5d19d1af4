"""Rollout, optimization and evaluation across on-policy and off-policy regimes."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .advantage import AdvantageSet, group_advantages
from .config import ExperimentConfig, TrainSchedule, WarmStartConfig, dump_config, load_config
from .envs import TaskInstance, generate, make_eval_set, verify
from .objective import (ObjectiveConfig, TokenBatch, batch_delta, entropy_gate_mask, loss_and_grad,
                        make_proxy)
from .policy import (NumericalError, PolicyParams, Trajectory, Vocabulary, backward, config_hash,
                     context_window_of, default_vocabulary, forward_batch, init_params, load_checkpoint,
                     log_softmax_rows, sample_batch, save_checkpoint)
from . import telemetry

log = logging.getLogger(__name__)

ROLLOUT_STREAM, PROMPT_STREAM = 2, 1


@dataclass
class RolloutGroup:
    instance: TaskInstance
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: AdvantageSet
    paths: list[str | None]


@dataclass
class TrainBatch:
    groups: list[RolloutGroup]
    tokens: TokenBatch
    behavior_snapshot: str
    step: int = 0
    fingerprint: str = ""

    @property
    def delta(self) -> float:
        return self.tokens.delta

    @property
    def n_trajectories(self) -> int:
        return sum(len(g.trajectories) for g in self.groups)


def params_digest(params: PolicyParams) -> str:
    return hashlib.sha256(params.to_vector().tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------- optimizer

@dataclass
class TrainState:
    params: PolicyParams
    step: int = 0
    opt: dict = field(default_factory=dict)
    opt_t: int = 0


def apply_update(state: TrainState, grads: dict, schedule: TrainSchedule):
    lr = schedule.learning_rate
    if schedule.grad_clip_norm is not None:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if norm > schedule.grad_clip_norm:
            grads = {k: g * (schedule.grad_clip_norm / norm) for k, g in grads.items()}
    p = state.params.blocks
    if schedule.optimizer == "sgd":
        for k in state.params.names():
            p[k] = p[k] - lr * grads[k]
    elif schedule.optimizer == "momentum":
        for k in state.params.names():
            v = state.opt.get(f"v/{k}", np.zeros_like(p[k]))
            v = schedule.momentum * v + grads[k]
            state.opt[f"v/{k}"] = v
            p[k] = p[k] - lr * v
    else:
        b1, b2 = schedule.adam_betas
        state.opt_t += 1
        t = state.opt_t
        for k in state.params.names():
            m = b1 * state.opt.get(f"m/{k}", np.zeros_like(p[k])) + (1 - b1) * grads[k]
            v = b2 * state.opt.get(f"v/{k}", np.zeros_like(p[k])) + (1 - b2) * grads[k] ** 2
            state.opt[f"m/{k}"], state.opt[f"v/{k}"] = m, v
            p[k] = p[k] - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + schedule.adam_eps)
    state.params.check_finite()


# ---------------------------------------------------------------- rollout

def training_instances(env_cfg, vocab: Vocabulary, seed: int, step: int, n: int) -> list[TaskInstance]:
    rng = np.random.default_rng([seed, step, PROMPT_STREAM])
    seeds = rng.integers(0, 2 ** 31 - 1, size=n)
    return [generate(env_cfg.family, int(s), env_cfg.difficulty, vocab, env_cfg.p_direct) for s in seeds]


def _contexts(trajectories, window: int, pad: int) -> np.ndarray:
    rows = []
    for tr in trajectories:
        seq = list(tr.prompt) + list(tr.output)
        base = len(tr.prompt)
        for t in range(len(tr.output)):
            rows.append(context_window_of(seq[:base + t], window, pad))
    return np.stack(rows)


def rollout(params: PolicyParams, instances, schedule: TrainSchedule, objective: ObjectiveConfig,
            vocab: Vocabulary, step: int = 0, ref_params: PolicyParams | None = None) -> TrainBatch:
    G = schedule.group_size
    prompts, caps = [], []
    for inst in instances:
        for _ in range(G):
            prompts.append(inst.prompt)
            caps.append(min(schedule.max_response_len, inst.response_budget))
    rng = np.random.default_rng([schedule.seed, step, ROLLOUT_STREAM])
    trajs = sample_batch(params, prompts, caps, rng, vocab.end, vocab.pad, schedule.temperature,
                         retain_distributions=True)
    groups = []
    adv_tokens = []
    for gi, inst in enumerate(instances):
        members = trajs[gi * G:(gi + 1) * G]
        outcomes = [verify(tr.output, inst, vocab) for tr in members]
        rewards = np.array([o.reward for o in outcomes])
        adv = group_advantages(rewards)
        groups.append(RolloutGroup(inst, members, rewards, adv, [o.matched_path for o in outcomes]))
        for a, tr in zip(adv.per_trajectory, members):
            adv_tokens.append(np.full(len(tr.output), a))
    lengths = np.array([len(tr.output) for tr in trajs])
    dists = np.array([d for tr in trajs for d in tr.step_distributions])
    probs = np.array([p for tr in trajs for p in tr.step_probs])
    nz = dists > 0
    entropy = -np.where(nz, dists * np.log(np.where(nz, dists, 1.0)), 0.0).sum(axis=1)
    tb = TokenBatch(
        contexts=_contexts(trajs, params.context_window, vocab.pad),
        tokens=np.array([t for tr in trajs for t in tr.output], dtype=np.int64),
        behavior_probs=probs,
        behavior_entropy=np.maximum(entropy, 0.0),
        advantages=np.concatenate(adv_tokens),
        traj_index=np.repeat(np.arange(len(trajs)), lengths),
        n_traj=len(trajs),
        delta=batch_delta(probs, objective.rho),
        entropy_selected=entropy_gate_mask(entropy, objective.rho),
        behavior_dists=dists,
    )
    if objective.uses_proxy and schedule.regime == "off_policy":
        tb.proxy = make_proxy(dists, objective)
    if objective.ref_kl_beta != 0:
        if ref_params is None:
            raise ValueError("ref_kl_beta > 0 needs reference parameters")
        tb.ref_log_probs = log_softmax_rows(forward_batch(ref_params, tb.contexts))[1]
    tb.freeze()
    return TrainBatch(groups, tb, params_digest(params), step, tb.fingerprint())


# ---------------------------------------------------------------- optimization

def _merge(diags: list[dict]) -> dict:
    tokens = sum(d["token_count"] for d in diags)
    below = sum(d["below_delta_count"] for d in diags)
    supported = sum(d["supported_below_count"] for d in diags)
    gated = sum(d["gated_count"] for d in diags)
    return {
        "loss": float(np.mean([d["loss"] for d in diags])),
        "surrogate_mean": sum(d["surrogate_mean"] * d["token_count"] for d in diags) / max(tokens, 1),
        "kl_mean_gated": sum(d["kl_mean_gated"] * d["gated_count"] for d in diags) / gated if gated else 0.0,
        "delta": diags[0]["delta"],
        "below_delta_count": below,
        "supported_below_count": supported,
        "gated_count": gated,
        "reg_ratio": supported / below if below else None,
        "mean_entropy": sum(d["mean_entropy"] * d["token_count"] for d in diags) / max(tokens, 1),
        "token_count": tokens,
        "updates": len(diags),
    }


def minibatch_partition(batch: TrainBatch, schedule: TrainSchedule) -> list[np.ndarray]:
    """Trajectory-id slices made of whole prompt groups."""
    n_traj = batch.tokens.n_traj
    if schedule.regime == "on_policy" or schedule.updates_per_rollout == 1:
        return [np.arange(n_traj)]
    per = schedule.mini_batch * schedule.group_size
    return [np.arange(s, min(s + per, n_traj)) for s in range(0, n_traj, per)]


def train_step(state: TrainState, batch: TrainBatch, config: ObjectiveConfig, schedule: TrainSchedule,
               return_grads: bool = False):
    """One rollout's worth of updates; returns (state, diagnostics[, first-update gradients])."""
    tb = batch.tokens
    proxy_source = "current" if schedule.regime == "on_policy" else "batch"
    diags, first = [], None
    for part in minibatch_partition(batch, schedule):
        sub = tb if part.size == tb.n_traj else tb.subset(part)
        try:
            _, grads, diag, _ = loss_and_grad(state.params, sub, config, proxy_source)
        except NumericalError as exc:
            raise NumericalError(f"step {batch.step}: {exc}") from None
        if first is None:
            first = {k: v.copy() for k, v in grads.items()}
        apply_update(state, grads, schedule)
        diags.append(diag)
    if tb.fingerprint() != batch.fingerprint:
        raise RuntimeError("behavior data changed during the update")
    state.step = batch.step
    out = _merge(diags)
    return (state, out, first) if return_grads else (state, out)


# ---------------------------------------------------------------- evaluation

def evaluate(params: PolicyParams, eval_set, vocab: Vocabulary, max_len: int = 32):
    """Greedy-decoding accuracy and a per-family breakdown."""
    if not eval_set:
        raise ValueError("empty evaluation set")
    caps = [min(max_len, inst.response_budget) for inst in eval_set]
    trajs = sample_batch(params, [inst.prompt for inst in eval_set], caps, None, vocab.end, vocab.pad,
                         greedy=True)
    per: dict[str, list[float]] = {}
    for inst, tr in zip(eval_set, trajs):
        per.setdefault(inst.family, []).append(verify(tr.output, inst, vocab).reward)
    rewards = [r for v in per.values() for r in v]
    return float(np.mean(rewards)), {k: float(np.mean(v)) for k, v in sorted(per.items())}


# ---------------------------------------------------------------- warm start

def demonstrations(instances, ws: WarmStartConfig, vocab: Vocabulary, rng: np.random.Generator):
    """(prompt, target) pairs: a stand-in base model with rare, half-learned connector paths."""
    alt = vocab.id("ALT")
    noise = list(vocab.designated.get("irrelevant", ()))
    digit_ids = vocab.ids([str(d) for d in range(10)])
    out = []
    for inst in instances:
        if inst.family == "spark_gated":
            if rng.random() < ws.connector_rate:
                target = list(inst.reference)
                for j in range(1, inst.difficulty + 1):
                    if rng.random() >= ws.connector_accuracy:
                        target[j] = int(rng.choice(digit_ids))
                assert target[0] == alt
            else:
                target = list(inst.meta["direct"])
        else:
            target = list(inst.reference)
        if noise and rng.random() < ws.irrelevant_rate:
            target[int(rng.integers(len(target)))] = int(rng.choice(noise))
        out.append((list(inst.prompt), target))
    return out


def supervised_fit(params: PolicyParams, pairs, steps: int, learning_rate: float, batch_size: int,
                   seed: int, vocab: Vocabulary) -> PolicyParams:
    """Token-level cross-entropy with Adam on teacher-forced contexts."""
    params = params.copy()
    ctx, tgt = [], []
    for prompt, target in pairs:
        seq = prompt + target
        for t in range(len(target)):
            ctx.append(context_window_of(seq[:len(prompt) + t], params.context_window, vocab.pad))
            tgt.append(target[t])
    ctx, tgt = np.stack(ctx), np.array(tgt)
    rng = np.random.default_rng(seed)
    state = TrainState(params)
    sched = TrainSchedule(learning_rate=learning_rate, optimizer="adam")
    for _ in range(steps):
        idx = rng.integers(0, tgt.size, size=min(batch_size, tgt.size))
        logits, cache = forward_batch(state.params, ctx[idx], keep_cache=True)
        probs, _, _ = log_softmax_rows(logits)
        d = probs
        d[np.arange(idx.size), tgt[idx]] -= 1.0
        apply_update(state, backward(state.params, cache, d / idx.size), sched)
    return state.params


def warm_start(params: PolicyParams, ws: WarmStartConfig, env_cfg, vocab: Vocabulary) -> PolicyParams:
    if ws.steps == 0:
        return params
    rng = np.random.default_rng([ws.seed, 17])
    pool = [generate(env_cfg.family, 10_000_000 + i, env_cfg.difficulty, vocab, env_cfg.p_direct)
            for i in range(20000)]
    pairs = demonstrations(pool, ws, vocab, rng)
    return supervised_fit(params, pairs, ws.steps, ws.learning_rate, ws.batch_size, ws.seed, vocab)


# ---------------------------------------------------------------- experiment

def initial_params(cfg: ExperimentConfig, vocab: Vocabulary) -> PolicyParams:
    m = cfg.model
    params = init_params(vocab.size, m.context_window, m.embed_dim, m.hidden_size, m.init_seed, m.attention,
                         m.output_scale)
    return warm_start(params, m.warm_start, cfg.env, vocab)


def step_metrics(batch: TrainBatch, vocab: Vocabulary, low_prob_window: float) -> dict:
    tb = batch.tokens
    n = max(len(tb), 1)
    spark = np.isin(tb.tokens, vocab.designated.get("spark", ()))
    irr = np.isin(tb.tokens, vocab.designated.get("irrelevant", ()))
    return {
        "spark_frequency": float(spark.sum() / n),
        "irrelevant_low_prob_rate": float((irr & (tb.behavior_probs <= low_prob_window)).sum() / n),
        "behavior_entropy": float(tb.behavior_entropy.mean()),
    }


def _save_state(path, state: TrainState, vocab: Vocabulary, chash: str):
    save_checkpoint(path, state.params, vocab, chash, extra=state.opt,
                    meta={"step": state.step, "opt_t": state.opt_t})


def _load_state(path, chash: str) -> tuple[TrainState, Vocabulary]:
    params, vocab, header, extra = load_checkpoint(path)
    if header["config_hash"] != chash:
        raise ValueError(f"{path}: checkpoint was written under a different config")
    return TrainState(params, int(header["meta"]["step"]), dict(extra), int(header["meta"]["opt_t"])), vocab


def run_experiment(config, out_dir, resume=None, stop_after: int | None = None, probes: bool | None = None):
    """Run a configured experiment into ``out_dir``; returns the list of MetricsRow written.

    ``stop_after`` halts early (simulating an interruption) without changing
    the configuration; ``probes`` overrides telemetry probing on/off.
    """
    cfg = load_config(config) if isinstance(config, (str, Path)) else config
    out = Path(out_dir)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    chash = config_hash(cfg.to_dict())
    vocab = default_vocabulary(cfg.model.vocab_size)
    sched, obj, tel = cfg.schedule, cfg.objective, cfg.telemetry
    eval_set = make_eval_set(cfg.env.family, cfg.env.eval_size, cfg.env.difficulty, cfg.env.eval_seed_offset,
                             vocab, cfg.env.p_direct)
    probing = tel.enabled if probes is None else probes
    probe_path = out / "probes.jsonl"
    rows: list[telemetry.MetricsRow] = []
    ref_params = None

    if resume is not None:
        state, _ = _load_state(resume, chash)
        writer = telemetry.MetricsWriter(out / "metrics.csv", resume_from_step=state.step)
        telemetry.truncate_probes(probe_path, state.step)
        if obj.ref_kl_beta != 0:
            ref_params = initial_params(cfg, vocab)
    else:
        state = TrainState(initial_params(cfg, vocab))
        ref_params = state.params.copy() if obj.ref_kl_beta != 0 else None
        writer = telemetry.MetricsWriter(out / "metrics.csv")
        probe_path.write_text("")
        acc, _ = evaluate(state.params, eval_set, vocab, sched.max_response_len)
        row = telemetry.MetricsRow(step=0, eval_accuracy=acc)
        writer.write(row)
        rows.append(row)
        _save_state(out / "ckpt" / "step_000000.ckpt", state, vocab, chash)

    for step in range(state.step + 1, sched.max_steps + 1):
        if stop_after is not None and step > stop_after:
            break
        instances = training_instances(cfg.env, vocab, sched.seed, step, sched.rollout_batch)
        batch = rollout(state.params, instances, sched, obj, vocab, step, ref_params)
        state, diag = train_step(state, batch, obj, sched)
        extra = step_metrics(batch, vocab, tel.low_prob_window)
        if probing and step % tel.probe_every == 0:
            prng = np.random.default_rng([tel.probe_seed, sched.seed, step])
            tb = batch.tokens
            telemetry.append_probes(probe_path, telemetry.probe(
                tb.tokens, tb.behavior_probs, tb.behavior_entropy, vocab.designated, tel.subsample_rate, step,
                prng))
        acc = None
        if step % sched.eval_every == 0 or step == sched.max_steps:
            acc, _ = evaluate(state.params, eval_set, vocab, sched.max_response_len)
            _save_state(out / "ckpt" / f"step_{step:06d}.ckpt", state, vocab, chash)
        row = telemetry.MetricsRow(step=step, eval_accuracy=acc, mean_entropy=extra["behavior_entropy"],
                                   loss=diag["loss"], delta=diag["delta"], reg_ratio=diag["reg_ratio"],
                                   gated_count=diag["gated_count"], spark_frequency=extra["spark_frequency"],
                                   irrelevant_low_prob_rate=extra["irrelevant_low_prob_rate"])
        writer.write(row)
        rows.append(row)
        if step % 100 == 0:
            log.info("step %d loss %.4f entropy %.3f spark %.4f acc %s", step, diag["loss"],
                     extra["behavior_entropy"], extra["spark_frequency"], acc)

    if tel.plots and (stop_after is None or stop_after >= sched.max_steps):
        from .plotting import render_all
        render_all(out)
    return rows


def load_params(path) -> tuple[PolicyParams, Vocabulary]:
    params, vocab, _, _ = load_checkpoint(path)
    return params, vocab


def config_echo(out_dir) -> dict:
    return json.loads((Path(out_dir) / "config.json").read_text())
