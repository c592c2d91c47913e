"""A live refinement session: one volume, the evolving probability map,
pending expert hints, per-step metrics and interaction suggestions.

This is the engine behind both the terminal client and the HTTP server.
All stepping is argmax-mode (deterministic), so a session driven with the
same hint points as a trainer evaluation reproduces its reports exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import confidence as conf_mod
from . import env, expert, metrics, nn
from .guide import GuideConfig, rank_regions, slic_supervoxels, suggestions_payload, \
    supervoxel_count_at_step
from .trainer import TrainConfig, load_training_checkpoint
from .volume import read_volume


@dataclass
class InteractiveSession:
    seg_params: nn.Params
    seg_spec: nn.SegNetSpec
    conf_params: nn.Params
    conf_spec: nn.ConfNetSpec
    cfg: TrainConfig
    image: np.ndarray
    label: np.ndarray | None
    state: env.EpisodeState
    guide_cfg: GuideConfig = field(default_factory=GuideConfig)
    history: list[metrics.StepReport] = field(default_factory=list)
    pending_hints: list[expert.HintPoint] = field(default_factory=list)
    hint_count: int = 0
    suggestions: list[dict] = field(default_factory=list)
    conf_map: np.ndarray | None = None
    sv_labels: np.ndarray | None = None

    @classmethod
    def open(cls, ckpt_path: str | Path, volume_path: str | Path,
             label_path: str | Path | None = None) -> "InteractiveSession":
        seg_params, conf_params, _, _, cfg, _ = load_training_checkpoint(ckpt_path)
        image = read_volume(volume_path).data
        label = None
        if label_path:
            label = read_volume(label_path).data.astype(np.uint8)
            if label.shape != image.shape:
                raise ValueError("label shape differs from image shape")
        return cls.from_arrays(seg_params, conf_params, cfg, image, label)

    @classmethod
    def from_arrays(cls, seg_params, conf_params, cfg: TrainConfig,
                    image: np.ndarray, label: np.ndarray | None) -> "InteractiveSession":
        session = cls(
            seg_params=seg_params, seg_spec=cfg.seg_spec(),
            conf_params=conf_params, conf_spec=cfg.conf_spec(),
            cfg=cfg, image=image.astype(np.float32), label=label,
            state=env.EpisodeState.initial(image.astype(np.float32)),
        )
        session._refresh_suggestions(session._probe_confidence())
        return session

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.image.shape)

    @property
    def step_count(self) -> int:
        return len(self.history)

    def add_hints(self, points: list[tuple[int, int, int]]) -> int:
        """Queue hint points for the next step; rejects out-of-volume points."""
        d, h, w = self.shape
        accepted = []
        for p in points:
            z, y, x = (int(v) for v in p)
            if not (0 <= z < d and 0 <= y < h and 0 <= x < w):
                raise ValueError(f"hint point {(z, y, x)} outside volume {self.shape}")
            accepted.append(expert.HintPoint(z, y, x))
        self.pending_hints.extend(accepted)
        return len(accepted)

    def _forward(self):
        channels = self.state.channels()
        policy, value, _ = nn.seg_forward(self.seg_params, self.seg_spec, channels,
                                          want_cache=False)
        actions = env.sample_actions(policy, mode="argmax")
        conf_in = np.concatenate([channels, conf_mod.action_channel(actions.values)[None]])
        conf, _ = nn.conf_forward(self.conf_params, self.conf_spec, conf_in, want_cache=False)
        return actions, conf

    def _probe_confidence(self) -> np.ndarray:
        """Confidence of the actions the policy would take right now."""
        _, conf = self._forward()
        return conf

    def step(self) -> metrics.StepReport:
        """Apply pending hints, run one argmax refinement step, refresh suggestions."""
        if self.pending_hints:
            hint = expert.gaussian_hint_map(self.shape, self.pending_hints,
                                            prev=self.state.hint)
            self.hint_count += len(self.pending_hints)
            self.pending_hints = []
            self.state = env.EpisodeState(self.state.image, self.state.prob, hint,
                                          self.state.step)
        actions, conf = self._forward()
        prev_prob = self.state.prob
        self.state = env.apply_actions(self.state, actions)
        self.conf_map = conf

        dice = float("nan")
        assd = None
        mis = float("nan")
        reward_sum = float("nan")
        if self.label is not None:
            pred = metrics.binarize(self.state.prob)
            dice = metrics.dice(pred, self.label)
            assd = metrics.safe_assd(pred, self.label)
            mis = env.misunderstanding_rate(prev_prob, self.state.prob, self.label)
            gain = env.gain_map(prev_prob, self.state.prob, self.label)
            reward_sum = env.self_adaptive_reward(gain, conf, self.cfg.episode).total
        report = metrics.StepReport(
            step=self.step_count + 1, dice=dice, assd=assd,
            misunderstanding_rate=mis, reward_sum=reward_sum,
        )
        self.history.append(report)
        self._refresh_suggestions(conf)
        return report

    def _refresh_suggestions(self, conf: np.ndarray) -> None:
        n = supervoxel_count_at_step(self.guide_cfg, self.step_count + 1)
        sv = slic_supervoxels(self.image, n, compactness=self.guide_cfg.compactness,
                              spacing=self.guide_cfg.spacing)
        ranked = rank_regions(conf, sv, self.guide_cfg.top_k)
        self.sv_labels = sv.labels
        self.conf_map = conf
        self.suggestions = suggestions_payload(ranked, sv)

    def get_slice(self, plane: str, index: int, layer: str) -> np.ndarray:
        """2-D grid for (plane, index): f32 for scalar layers, i32 region ids
        (suggested regions only, -1 elsewhere) for the suggestions layer."""
        layers = {
            "image": self.image,
            "prob": self.state.prob,
            "hint": self.state.hint,
            "conf": self.conf_map if self.conf_map is not None
            else np.full(self.shape, 0.5, np.float32),
        }
        if layer == "suggestions":
            ids = {item["label"] for item in self.suggestions}
            grid = np.where(np.isin(self.sv_labels, list(ids)), self.sv_labels, -1)
            vol = grid.astype(np.int32)
        elif layer in layers:
            vol = layers[layer].astype(np.float32)
        else:
            raise ValueError(f"unknown layer {layer!r}")
        axis = {"z": 0, "y": 1, "x": 2}.get(plane)
        if axis is None:
            raise ValueError(f"unknown plane {plane!r}")
        if not (0 <= index < vol.shape[axis]):
            raise ValueError(f"slice index {index} out of range for plane {plane}")
        return np.ascontiguousarray(np.take(vol, index, axis=axis))
