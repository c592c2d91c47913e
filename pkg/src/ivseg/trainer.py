"""End-to-end training: supervised episodes, confidence learning, and the
semi-supervised branch with confidence-masked gradients.

The loop follows a per-sample cadence: roll out one labeled episode, update
the segmentation heads (value before policy) and the confidence net, then
interleave exactly one unlabeled episode trained against simulated labels
under the decisiveness mask. Gradients accumulate within an episode and
each network takes one Adam step per episode.

All randomness is derived from (seed, purpose-tag, epoch, index) seed
sequences, so a checkpoint plus its epoch number is a complete RNG state
and resumed runs reproduce the uninterrupted log bit for bit.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import confidence as conf_mod
from . import env, expert, metrics, nn
from .synth import Sample, augment, load_manifest
from .volume import load_checkpoint, save_checkpoint

# RNG purpose tags (stable across versions; never renumber)
TAG_INIT_SEG = 1
TAG_INIT_CONF = 2
TAG_SPLIT = 3
TAG_SHUFFLE = 4
TAG_EPISODE = 5
TAG_UNLABELED = 6
TAG_EVAL = 7


def derived_rng(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose, epoch, index) tuples."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def eval_episode_rng(seed: int, sample_index: int) -> np.random.Generator:
    """The exact stream evaluate() uses for one sample's hint selection."""
    return derived_rng(seed, TAG_EVAL, sample_index)


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    episode: env.EpisodeConfig = field(default_factory=env.EpisodeConfig)
    schedule: expert.HintSchedule = field(default_factory=expert.HintSchedule)
    delta: conf_mod.DeltaSchedule = field(default_factory=conf_mod.DeltaSchedule)
    labeled_fraction: float = 1.0
    seed: int = 0
    advantage_mode: str = "per_voxel"
    entropy_coef: float = 0.05   # A3C-style exploration bonus; 0 disables
    advantage_norm: bool = True  # standardize policy-gradient weights per episode
    exploration_floor: float = 0.05  # train-time sampling mixes in this much uniform
    update_cadence: str = "step"     # "step": one Adam step per timestep; "episode"
    eval_every: int = 0          # 0: evaluate only after the last epoch
    checkpoint_every: int = 50
    augment: bool = True
    workers: int = 1
    seg_shared_widths: tuple[int, ...] = (4, 4, 8)
    seg_head_widths: tuple[int, ...] = (4, 4)
    conf_widths: tuple[int, ...] = (2, 4, 4, 4, 4, 2)

    def __post_init__(self):
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ValueError("labeled_fraction must be in (0, 1]")
        if self.episode.T != len(self.schedule.points_per_step):
            raise ValueError("hint schedule length must equal the episode horizon")

    def seg_spec(self) -> nn.SegNetSpec:
        return nn.SegNetSpec.build(
            shared_widths=tuple(self.seg_shared_widths),
            head_widths=tuple(self.seg_head_widths),
        )

    def conf_spec(self) -> nn.ConfNetSpec:
        return nn.ConfNetSpec.build(widths=tuple(self.conf_widths))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "episode" in d:
            d["episode"] = env.EpisodeConfig(**d["episode"])
        if "schedule" in d:
            sched = dict(d["schedule"])
            sched["points_per_step"] = tuple(sched["points_per_step"])
            d["schedule"] = expert.HintSchedule(**sched)
        if "delta" in d:
            d["delta"] = conf_mod.DeltaSchedule(**d["delta"])
        for key in ("seg_shared_widths", "seg_head_widths", "conf_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainLogRecord:
    epoch: int
    policy_loss: float
    value_loss: float
    conf_loss: float
    mean_dice: list[float]       # per step, labeled training episodes
    misunderstanding_rate: float
    delta: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Trace:
    """Everything one episode produced, enough to replay and to update."""

    image: np.ndarray
    label: np.ndarray | None
    probs: list[np.ndarray]
    hints: list[np.ndarray]
    hint_points: list[list[expert.HintPoint]]
    actions: list[env.ActionMap]
    policies: list[np.ndarray]
    values: list[np.ndarray]
    confs: list[np.ndarray]
    gains: list[np.ndarray]
    rewards: list[env.RewardMap]
    seg_caches: list | None
    conf_caches: list | None
    sim_labels: list[np.ndarray] | None = None
    grad_masks: list[np.ndarray] | None = None


def rollout_episode(
    seg_params: nn.Params,
    seg_spec: nn.SegNetSpec,
    conf_params: nn.Params,
    conf_spec: nn.ConfNetSpec,
    sample: Sample,
    cfg: TrainConfig,
    rng: np.random.Generator,
    mode: str = "sample",
    labeled: bool = True,
    delta: float | None = None,
    with_caches: bool = True,
) -> Trace:
    """Run one T-step refinement episode.

    The sample's label always drives the simulated expert's clicks; when
    ``labeled`` is false it is withheld from rewards, which are computed
    against per-step simulated labels instead, and decisiveness masks are
    recorded for the gradient update.
    """
    if sample.label is None:
        raise ValueError("rollout needs a label as the simulated expert's click source")
    ep = cfg.episode
    state = env.EpisodeState.initial(sample.image)
    trace = Trace(
        image=sample.image, label=sample.label,
        probs=[state.prob], hints=[], hint_points=[], actions=[], policies=[],
        values=[], confs=[], gains=[], rewards=[],
        seg_caches=[] if with_caches else None,
        conf_caches=[] if with_caches else None,
        sim_labels=None if labeled else [],
        grad_masks=None if labeled else [],
    )
    hint = np.zeros_like(sample.image, dtype=np.float32)
    for t in range(ep.T):
        k = cfg.schedule.points_per_step[t]
        if k > 0:
            pred = metrics.binarize(state.prob)
            points = expert.select_hints(sample.label, pred, k, rng,
                                         cfg.schedule.perturb_radius)
            hint = expert.gaussian_hint_map(sample.image.shape, points, prev=hint)
        else:
            points = []
        state = env.EpisodeState(state.image, state.prob, hint, state.step)
        channels = state.channels()
        policy, value, seg_cache = nn.seg_forward(seg_params, seg_spec, channels,
                                                  want_cache=with_caches)
        if mode == "sample" and cfg.exploration_floor > 0.0:
            eta = cfg.exploration_floor
            behavior = (1.0 - eta) * policy + eta / policy.shape[0]
            actions = env.sample_actions(behavior.astype(np.float32), rng, mode=mode)
        else:
            actions = env.sample_actions(policy, rng, mode=mode)
        conf_in = np.concatenate([channels, conf_mod.action_channel(actions.values)[None]])
        conf, conf_cache = nn.conf_forward(conf_params, conf_spec, conf_in,
                                           want_cache=with_caches)
        next_state = env.apply_actions(state, actions)

        if labeled:
            target = sample.label
        else:
            target = conf_mod.simulated_label(actions.values, conf)
            trace.sim_labels.append(target)
            trace.grad_masks.append(conf_mod.gradient_mask(conf, delta))
        gain = env.gain_map(state.prob, next_state.prob, target)
        reward = env.self_adaptive_reward(gain, conf, ep)

        trace.hints.append(hint)
        trace.hint_points.append(points)
        trace.actions.append(actions)
        trace.policies.append(policy)
        trace.values.append(value)
        trace.confs.append(conf)
        trace.gains.append(gain)
        trace.rewards.append(reward)
        trace.probs.append(next_state.prob)
        if with_caches:
            trace.seg_caches.append(seg_cache)
            trace.conf_caches.append(conf_cache)
        state = next_state
    return trace


@dataclass
class SegUpdateResult:
    policy_loss: float
    value_loss: float
    applied_order: list[str]


def _episode_advantages(trace: Trace, cfg: TrainConfig):
    reward_maps = [r.per_voxel for r in trace.rewards]
    returns, advantages = env.returns_and_advantages(
        reward_maps, trace.values, cfg.episode, mode=cfg.advantage_mode
    )
    if cfg.advantage_norm:
        # standardize the policy-gradient weights over the episode's unmasked
        # voxels: removes the class-imbalance mean drive, tames the scale
        if trace.grad_masks is not None:
            sel = np.concatenate([
                a[m.astype(bool)] for a, m in zip(advantages, trace.grad_masks)
            ]) if any(m.any() for m in trace.grad_masks) else np.zeros(1, np.float32)
        else:
            sel = np.concatenate([a.ravel() for a in advantages])
        mu = float(sel.mean()) if sel.size else 0.0
        sd = float(sel.std()) if sel.size else 1.0
        advantages = [((a - mu) / (sd + 1e-8)).astype(np.float32) for a in advantages]
    return returns, advantages


def _step_gradients(seg_params, seg_spec, trace, cfg, returns, advantages, t,
                    norm, grads):
    """Backward one timestep's losses into ``grads``; returns the loss terms."""
    policy = trace.policies[t]
    idx = trace.actions[t].indices
    mask = None if trace.grad_masks is None else trace.grad_masks[t].astype(np.float32)

    adv = advantages[t]
    diff = trace.values[t].astype(np.float64) - returns[t].astype(np.float64)
    p_a = np.take_along_axis(policy, idx[None].astype(np.int64), axis=0)[0]
    logp = np.log(np.clip(p_a.astype(np.float64), 1e-7, None))
    if mask is not None:
        adv = adv * mask
        diff = diff * mask
        logp = logp * mask  # masked voxels drop out of the loss value too
    policy_loss = float(-(adv.astype(np.float64) * logp).sum() / norm)
    value_loss = float((diff ** 2).sum() / norm)

    onehot = np.zeros_like(policy)
    np.put_along_axis(onehot, idx[None].astype(np.int64), 1.0, axis=0)
    dlogits = (policy - onehot) * (adv / norm)[None].astype(policy.dtype)
    if cfg.entropy_coef > 0.0:
        # exploration bonus: descend -coef*H(pi), i.e. add coef*pi*(log pi + H)
        logpi = np.log(np.clip(policy, 1e-7, None))
        ent = -(policy * logpi).sum(axis=0, keepdims=True)
        dent = policy * (logpi + ent)
        if mask is not None:
            dent = dent * mask[None]
        dlogits += (cfg.entropy_coef / norm) * dent
    dvalue = (2.0 * diff / norm).astype(trace.values[t].dtype)
    nn.seg_backward(seg_params, seg_spec, trace.seg_caches[t], dlogits, dvalue, grads)
    return policy_loss, value_loss


def segmentation_gradients(
    seg_params: nn.Params,
    seg_spec: nn.SegNetSpec,
    trace: Trace,
    cfg: TrainConfig,
) -> tuple[nn.Params, float, float]:
    """Accumulated per-episode gradients plus the (policy, value) loss values.

    Advantages enter the policy loss as constants; masked voxels (unlabeled
    episodes) contribute exactly zero to both losses.
    """
    ep = cfg.episode
    returns, advantages = _episode_advantages(trace, cfg)
    norm = float(ep.T * trace.values[0].size)
    grads: nn.Params = {}
    policy_loss = 0.0
    value_loss = 0.0
    for t in range(ep.T):
        pl, vl = _step_gradients(seg_params, seg_spec, trace, cfg, returns,
                                 advantages, t, norm, grads)
        policy_loss += pl
        value_loss += vl
    return grads, policy_loss, value_loss


def update_segmentation(
    seg_params: nn.Params,
    seg_spec: nn.SegNetSpec,
    trace: Trace,
    cfg: TrainConfig,
    adam: dict[str, nn.AdamState],
) -> SegUpdateResult:
    """Episode update: value head steps first, then policy, then the shared
    trunk (which carries both losses' contributions).

    With update_cadence="step" each timestep's gradient takes its own Adam
    step (the per-step reading of the training listing); "episode"
    accumulates all steps into one.
    """
    applied = []
    policy_loss = 0.0
    value_loss = 0.0
    if cfg.update_cadence == "step":
        returns, advantages = _episode_advantages(trace, cfg)
        norm = float(trace.values[0].size)
        for t in range(cfg.episode.T):
            grads: nn.Params = {}
            pl, vl = _step_gradients(seg_params, seg_spec, trace, cfg, returns,
                                     advantages, t, norm, grads)
            policy_loss += pl
            value_loss += vl
            for group in ("value", "policy", "shared"):
                nn.adam_step(seg_params, grads, adam[group])
                applied.append(group)
        policy_loss /= cfg.episode.T
        value_loss /= cfg.episode.T
    else:
        grads, policy_loss, value_loss = segmentation_gradients(seg_params, seg_spec,
                                                                trace, cfg)
        for group in ("value", "policy", "shared"):
            nn.adam_step(seg_params, grads, adam[group])
            applied.append(group)
    return SegUpdateResult(policy_loss=policy_loss, value_loss=value_loss, applied_order=applied)


def update_confidence(
    conf_params: nn.Params,
    conf_spec: nn.ConfNetSpec,
    trace: Trace,
    label: np.ndarray,
    adam: nn.AdamState,
    cfg: TrainConfig,
) -> float:
    """Adam on the symmetric BCE loss; one step per timestep or per episode,
    following the configured cadence."""
    ep = cfg.episode
    grads: nn.Params = {}
    total = 0.0
    for t in range(ep.T):
        actions = trace.actions[t]
        g = conf_mod.confidence_target(actions.values, label)
        c = trace.confs[t]
        n = float(c.size)
        dz = ((c - g) / n).astype(c.dtype)
        nn.conf_backward(conf_params, conf_spec, trace.conf_caches[t], dz, grads)
        total += conf_mod.bce(c, g)

        channels = np.stack([trace.image, trace.probs[t], trace.hints[t]]).astype(np.float32)
        x_sym = np.concatenate([channels, conf_mod.action_channel(-actions.values)[None]])
        c_sym, cache_sym = nn.conf_forward(conf_params, conf_spec, x_sym)
        dz_sym = ((c_sym - (1.0 - g)) / n).astype(c_sym.dtype)
        nn.conf_backward(conf_params, conf_spec, cache_sym, dz_sym, grads)
        total += conf_mod.bce(c_sym, 1.0 - g)
        if cfg.update_cadence == "step":
            nn.adam_step(conf_params, grads, adam)
            grads = {}
    if cfg.update_cadence != "step":
        nn.adam_step(conf_params, grads, adam)
    return total


def _episode_reports(trace: Trace) -> list[metrics.StepReport]:
    reports = []
    for t in range(len(trace.actions)):
        pred = metrics.binarize(trace.probs[t + 1])
        reports.append(metrics.StepReport(
            step=t + 1,
            dice=metrics.dice(pred, trace.label),
            assd=metrics.safe_assd(pred, trace.label),
            misunderstanding_rate=env.misunderstanding_rate(
                trace.probs[t], trace.probs[t + 1], trace.label
            ),
            reward_sum=trace.rewards[t].total,
        ))
    return reports


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_ADAM_GROUPS = ("value", "policy", "shared")


def _init_adam(seg_params, conf_params, seg_spec, lr):
    adam_seg = {
        g: nn.AdamState.init(seg_params, lr, names=nn.group_names(seg_spec, g))
        for g in _ADAM_GROUPS
    }
    adam_conf = nn.AdamState.init(conf_params, lr)
    return adam_seg, adam_conf


def save_training_checkpoint(path, seg_params, conf_params, adam_seg, adam_conf,
                             cfg: TrainConfig, epoch_next: int) -> None:
    tensors = {}
    for name, arr in seg_params.items():
        tensors[f"seg.{name}"] = arr
    for name, arr in conf_params.items():
        tensors[f"conf_net.{name}"] = arr
    steps = {}
    for gname, st in list(adam_seg.items()) + [("conf", adam_conf)]:
        for pname, m in st.m.items():
            tensors[f"adam.{gname}.m.{pname}"] = m
            tensors[f"adam.{gname}.v.{pname}"] = st.v[pname]
        steps[gname] = st.step
    meta = {
        "epoch_next": epoch_next,
        "adam_steps": steps,
        "config": cfg.to_dict(),
        "seg_spec": cfg.seg_spec().to_dict(),
        "conf_spec": cfg.conf_spec().to_dict(),
        "format": "ivseg-checkpoint-v1",
    }
    save_checkpoint(path, tensors, meta)


def load_training_checkpoint(path):
    """Returns (seg_params, conf_params, adam_seg, adam_conf, cfg, epoch_next)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != "ivseg-checkpoint-v1":
        raise ValueError(f"not an ivseg training checkpoint: {path}")
    cfg = TrainConfig.from_dict(meta["config"])
    seg_spec, conf_spec = cfg.seg_spec(), cfg.conf_spec()
    seg_params = {n[len("seg."):]: t for n, t in tensors.items() if n.startswith("seg.")}
    conf_params = {n[len("conf_net."):]: t for n, t in tensors.items()
                   if n.startswith("conf_net.")}
    _validate_params(seg_params, nn.param_shapes(seg_spec), "segmentation")
    _validate_params(conf_params, nn.param_shapes(conf_spec), "confidence")
    adam_seg, adam_conf = _init_adam(seg_params, conf_params, seg_spec, cfg.lr)
    for gname, st in list(adam_seg.items()) + [("conf", adam_conf)]:
        st.step = int(meta["adam_steps"][gname])
        for pname in st.m:
            st.m[pname] = tensors[f"adam.{gname}.m.{pname}"]
            st.v[pname] = tensors[f"adam.{gname}.v.{pname}"]
    return seg_params, conf_params, adam_seg, adam_conf, cfg, int(meta["epoch_next"])


def _validate_params(params, shapes, what):
    if set(params) != set(shapes):
        missing = set(shapes) ^ set(params)
        raise ValueError(f"{what} checkpoint does not match its spec: {sorted(missing)[:4]}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(
                f"{what} tensor {name} has shape {params[name].shape}, spec wants {shape}"
            )


# ---------------------------------------------------------------------------
# Train / evaluate
# ---------------------------------------------------------------------------

def split_manifest(n: int, labeled_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic labeled/unlabeled index split."""
    order = derived_rng(seed, TAG_SPLIT).permutation(n)
    n_labeled = max(1, int(round(labeled_fraction * n)))
    return sorted(order[:n_labeled].tolist()), sorted(order[n_labeled:].tolist())


@dataclass
class TrainResult:
    log: list[TrainLogRecord]
    checkpoint: Path
    out_dir: Path


def train(
    manifest: str | Path | list[Sample],
    cfg: TrainConfig,
    out_dir: str | Path,
    eval_samples: list[Sample] | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Run the full training loop and write logs plus a checkpoint series."""
    samples = load_manifest(manifest) if not isinstance(manifest, list) else manifest
    if not samples:
        raise ValueError("empty manifest")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seg_spec, conf_spec = cfg.seg_spec(), cfg.conf_spec()

    labeled_idx, unlabeled_idx = split_manifest(len(samples), cfg.labeled_fraction, cfg.seed)
    for i in labeled_idx:
        if samples[i].label is None:
            raise ValueError(f"sample {samples[i].id} assigned to the labeled split has no label")

    if resume is not None:
        seg_params, conf_params, adam_seg, adam_conf, ckpt_cfg, start_epoch = (
            load_training_checkpoint(resume)
        )
        if ckpt_cfg.to_dict() != cfg.to_dict():
            raise ValueError("resume config differs from checkpoint config")
    else:
        seg_params = nn.xavier_init(seg_spec, derived_rng(cfg.seed, TAG_INIT_SEG))
        conf_params = nn.xavier_init(conf_spec, derived_rng(cfg.seed, TAG_INIT_CONF))
        adam_seg, adam_conf = _init_adam(seg_params, conf_params, seg_spec, cfg.lr)
        start_epoch = 0

    log: list[TrainLogRecord] = []
    log_path = out / "train_log.jsonl"
    log_file = open(log_path, "a" if resume is not None else "w")
    t_start = time.monotonic()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            delta = conf_mod.delta_at_epoch(cfg.delta, epoch)
            order = derived_rng(cfg.seed, TAG_SHUFFLE, epoch).permutation(len(labeled_idx))
            if unlabeled_idx:
                u_order = derived_rng(cfg.seed, TAG_SHUFFLE, epoch, 1).permutation(
                    len(unlabeled_idx)
                )
            sums = {"policy": 0.0, "value": 0.0, "conf": 0.0, "mis": 0.0}
            dice_acc = np.zeros(cfg.episode.T, dtype=np.float64)
            n_mis = 0
            for k, oi in enumerate(order):
                sample = samples[labeled_idx[int(oi)]]
                rng = derived_rng(cfg.seed, TAG_EPISODE, epoch, k)
                if cfg.augment:
                    sample = augment(sample, rng)
                trace = rollout_episode(seg_params, seg_spec, conf_params, conf_spec,
                                        sample, cfg, rng, mode="sample", labeled=True)
                upd = update_segmentation(seg_params, seg_spec, trace, cfg, adam_seg)
                closs = update_confidence(conf_params, conf_spec, trace, trace.label,
                                          adam_conf, cfg)
                sums["policy"] += upd.policy_loss
                sums["value"] += upd.value_loss
                sums["conf"] += closs
                reports = _episode_reports(trace)
                dice_acc += [r.dice for r in reports]
                sums["mis"] += float(np.mean([r.misunderstanding_rate for r in reports]))
                n_mis += 1

                if unlabeled_idx:
                    urng = derived_rng(cfg.seed, TAG_UNLABELED, epoch, k)
                    usample = samples[unlabeled_idx[int(u_order[k % len(u_order)])]]
                    if cfg.augment:
                        usample = augment(usample, urng)
                    utrace = rollout_episode(seg_params, seg_spec, conf_params, conf_spec,
                                             usample, cfg, urng, mode="sample",
                                             labeled=False, delta=delta)
                    update_segmentation(seg_params, seg_spec, utrace, cfg, adam_seg)

            n_ep = max(1, len(order))
            record = TrainLogRecord(
                epoch=epoch,
                policy_loss=sums["policy"] / n_ep,
                value_loss=sums["value"] / n_ep,
                conf_loss=sums["conf"] / n_ep,
                mean_dice=(dice_acc / n_ep).tolist(),
                misunderstanding_rate=sums["mis"] / max(1, n_mis),
                delta=delta,
            )
            log.append(record)
            log_file.write(json.dumps(record.to_dict()) + "\n")
            log_file.flush()

            done = epoch + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.epochs:
                save_training_checkpoint(out / f"epoch{done:05d}.ckpt", seg_params,
                                         conf_params, adam_seg, adam_conf, cfg, done)
            if cfg.eval_every and eval_samples and done % cfg.eval_every == 0:
                _, rows = evaluate(seg_params, seg_spec, conf_params, conf_spec,
                                   eval_samples, cfg, cfg.seed,
                                   out_dir=out / f"eval_epoch{done:05d}")
    finally:
        log_file.close()

    final = out / "final.ckpt"
    save_training_checkpoint(final, seg_params, conf_params, adam_seg, adam_conf,
                             cfg, cfg.epochs)
    if eval_samples:
        evaluate(seg_params, seg_spec, conf_params, conf_spec, eval_samples, cfg,
                 cfg.seed, out_dir=out / "eval_final")
    elapsed = time.monotonic() - t_start
    (out / "train_meta.json").write_text(json.dumps({
        "elapsed_seconds": elapsed,
        "epochs": cfg.epochs - start_epoch,
        "labeled": len(labeled_idx),
        "unlabeled": len(unlabeled_idx),
    }))
    return TrainResult(log=log, checkpoint=final, out_dir=out)


def evaluate(
    seg_params: nn.Params,
    seg_spec: nn.SegNetSpec,
    conf_params: nn.Params,
    conf_spec: nn.ConfNetSpec,
    samples: list[Sample],
    cfg: TrainConfig,
    seed: int,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> tuple[list[list[metrics.StepReport]], list[dict]]:
    """Argmax-mode rollouts over a sample set with per-step reports.

    Deterministic in (seed, sample order); augmentation never applies.
    """
    def one(idx_sample):
        idx, sample = idx_sample
        rng = eval_episode_rng(seed, idx)
        trace = rollout_episode(seg_params, seg_spec, conf_params, conf_spec,
                                sample, cfg, rng, mode="argmax", labeled=True,
                                with_caches=False)
        return _episode_reports(trace)

    items = list(enumerate(samples))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, items))
    else:
        reports = [one(it) for it in items]

    rows = metrics.summarize_steps(reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_summary_csv(out / "summary.csv", rows)
        with open(out / "episodes.jsonl", "w") as f:
            for sample, reps in zip(samples, reports):
                for r in reps:
                    f.write(json.dumps({"id": sample.id, **r.to_dict()}) + "\n")
    return reports, rows
