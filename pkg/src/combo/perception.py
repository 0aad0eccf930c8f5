"""World-state estimation from an agent's own partial views.

Views are overlaid in time order into a :class:`FusedGrid` that remembers,
per cell, the latest observed content and how many steps ago it was seen.
A diffusion inpainter then proposes a complete state; cells seen this step
are clamped to what was observed, at every sampling step and at the end.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffusion as dm
from . import gridworld as gw
from . import tinynet as tn
from .cwm import StateCodec

UNKNOWN = -2
EMPTY = -1
AGE_SCALE = 10.0


@dataclass(frozen=True)
class FusedGrid:
    """Latest known content per cell (piece id, ``EMPTY`` or ``UNKNOWN``) with ages."""

    agent: int
    step: int
    content: np.ndarray      # (N,) int
    cut: np.ndarray          # (N,) bool, piece seen cut
    age: np.ndarray          # (N,) int, -1 where unknown

    @property
    def known(self) -> np.ndarray:
        return self.content != UNKNOWN

    @property
    def fresh(self) -> np.ndarray:
        return self.age == 0

    def known_fraction(self) -> float:
        return float(self.known.mean())


def fuse(history: Sequence[gw.PartialObservation], n_cells: int,
         step: int | None = None) -> FusedGrid:
    """Overlay observations oldest first; ages are measured from ``step``."""
    if not history:
        raise ValueError("need at least one observation")
    agent = history[0].agent
    content = np.full(n_cells, UNKNOWN, dtype=np.int64)
    cut = np.zeros(n_cells, dtype=bool)
    seen = np.full(n_cells, -1, dtype=np.int64)
    last = -1
    for obs in history:
        if obs.agent != agent:
            raise ValueError("observations from more than one agent")
        if obs.step < last:
            raise ValueError("observations must be in ascending time order")
        last = obs.step
        for c, p in obs.contents.items():
            content[c] = p
            cut[c] = p >= 0 and p in obs.cut
            seen[c] = obs.step
    now = last if step is None else step
    age = np.where(seen >= 0, now - seen, -1)
    return FusedGrid(agent, now, content, cut, age)


def fused_from_state(state: gw.GridState, agent: int, known: np.ndarray) -> FusedGrid:
    """A fresh view of ``state`` through an arbitrary known-cell mask."""
    cells = np.array(state.cells)
    content = np.where(known, cells, UNKNOWN)
    cut = np.array([known[c] and p >= 0 and state.pieces[p].cut for c, p in enumerate(cells)])
    age = np.where(known, 0, -1)
    return FusedGrid(agent, state.turn, content, cut, age)


# ---------------------------------------------------------------------------
# encoding

def fused_ids(codec: StateCodec, fused: FusedGrid) -> np.ndarray:
    """Content channel id per cell; -1 where unknown."""
    ids = np.where(fused.content >= 0, 1 + fused.content, 0)
    if codec.cuttable:
        ids = np.where(fused.cut, ids + codec.n_pieces, ids)
    return np.where(fused.known, ids, -1)


def condition_channels(codec: StateCodec) -> int:
    return codec.content_channels + 2 + 4


def encode_fused(codec: StateCodec, fused: FusedGrid, fixtures: np.ndarray) -> np.ndarray:
    """(N, Kc + 2 + F): content one-hot (all -1 if unknown), known flag, age, fixtures."""
    ids = fused_ids(codec, fused)
    onehot = codec.content_from_ids(np.maximum(ids, 0))
    onehot[ids < 0] = -1.0
    known = np.where(fused.known, 1.0, -1.0)[:, None]
    age = np.where(fused.known, np.minimum(fused.age, AGE_SCALE) / AGE_SCALE * 2.0 - 1.0, 1.0)[:, None]
    fx = np.where(fixtures, 1.0, -1.0)
    return np.concatenate([onehot, known, age, fx], axis=-1)


# ---------------------------------------------------------------------------
# model

@dataclass
class InpainterConfig:
    hidden: int = 96
    emb: int = 64
    depth: int = 3
    t_dim: int = 32
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    ddim_steps: int = 25
    clip: float | None = 1.0
    lr: float = 1e-3
    lr_final: float = 1e-4
    batch: int = 64
    steps: int = 2000
    uncertain_weight: float = 2.0
    init: str = "fused"             # sampler start: seen cells' last content noised to T, or pure "noise"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InpainterConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Estimate:
    state: gw.GridState
    valid: bool
    tensor: np.ndarray | None = None


class InpainterModel:
    def __init__(self, env: gw.EpisodeConfig, config: InpainterConfig,
                 net: tn.Network | None = None, history: list | None = None):
        self.env = replace(env, seed=0)
        self.config = config
        self.codec = StateCodec.for_config(env)
        c = self.codec
        if net is None:
            net = tn.Network({"kind": "cell", "cells": c.n_cells, "x_ch": c.content_channels,
                              "cond_ch": condition_channels(c), "vec_dim": 0,
                              "hidden": config.hidden, "emb": config.emb,
                              "depth": config.depth, "t_dim": config.t_dim}, seed=config.seed)
        self.net = net
        self.model = dm.DenoiserModel(net)
        self.sched = dm.linear_schedule(config.T, config.beta_min, config.beta_max)
        self.history = history or []

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        tn.save_file(self.net, path / "inpainter.ckpt")
        meta = {"env": self.env.to_dict(), "config": self.config.to_dict(), "history": self.history}
        (path / "inpainter.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "InpainterModel":
        path = Path(path)
        if not (path / "inpainter.json").exists():
            raise FileNotFoundError(f"no inpainter checkpoint under {path}")
        meta = json.loads((path / "inpainter.json").read_text())
        return cls(gw.EpisodeConfig.from_dict(meta["env"]), InpainterConfig.from_dict(meta["config"]),
                   tn.load_file(path / "inpainter.ckpt"), meta["history"])


@dataclass(frozen=True)
class InpaintExample:
    fused: FusedGrid
    state: gw.GridState


def train_inpainter(examples: Sequence[InpaintExample], config: InpainterConfig,
                    env: gw.EpisodeConfig | None = None, log: Callable | None = None,
                    steps_per_epoch: int = 100) -> InpainterModel:
    """Masked denoising: the target is the true content, unknown or stale cells weigh more."""
    if not examples:
        raise ValueError("inpainter training needs a non-empty dataset")
    env = env or examples[0].state.config
    model = InpainterModel(env, config)
    codec = model.codec
    cond = np.stack([encode_fused(codec, e.fused, codec.fixture_flags(e.state)) for e in examples])
    target = np.stack([codec.content_ids(e.state) for e in examples])
    weight = np.stack([np.where(e.fused.fresh, 1.0, config.uncertain_weight) for e in examples])
    rng = np.random.default_rng(config.seed)
    opt = tn.Adam(lr=config.lr)
    running, t0 = [], time.time()
    for it in range(config.steps):
        idx = rng.integers(len(examples), size=config.batch)
        batch = {"target": codec.content_from_ids(target[idx]), "cond": cond[idx],
                 "action": None, "weight": weight[idx]}
        net = model.net
        net.zero_grad()
        loss = dm.single_loss_tensor(model.model, batch, None, model.sched, rng, p_null=0.0)
        loss.backward()
        frac = it / max(config.steps - 1, 1)
        opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))
        opt.step(net.params, net.grads())
        running.append(float(loss.data))
        if (it + 1) % steps_per_epoch == 0 or it + 1 == config.steps:
            entry = {"epoch": len(model.history) + 1, "step": it + 1,
                     "loss": float(np.mean(running)), "seconds": round(time.time() - t0, 1)}
            model.history.append(entry)
            running = []
            if log:
                log("inpainter", entry)
    return model


def _clamp_tensor(codec: StateCodec, fused: FusedGrid) -> tuple[np.ndarray, np.ndarray]:
    ids = fused_ids(codec, fused)
    fresh = fused.fresh & (ids >= 0)
    return codec.content_from_ids(np.maximum(ids, 0)), fresh


def estimate_batch(model: InpainterModel, fused: Sequence[FusedGrid],
                   templates: Sequence[gw.GridState], rng: np.random.Generator) -> list:
    """Inpaint several fused grids at once; fresh cells are clamped throughout."""
    codec, sched, cfg = model.codec, model.sched, model.config
    cond = np.stack([encode_fused(codec, f, codec.fixture_flags(t)) for f, t in zip(fused, templates)])
    clamps = [_clamp_tensor(codec, f) for f in fused]
    known_x = np.stack([c[0] for c in clamps])
    mask = np.stack([c[1] for c in clamps])[..., None]

    def eps_fn(x_t, t):
        return model.model.eps_np(x_t, t, cond, None)

    def clamp(x, t):
        if t == 0:
            return np.where(mask, known_x, x)
        noisy = dm.forward_noise(known_x, t, rng.standard_normal(known_x.shape), sched)
        return np.where(mask, noisy, x)

    shape = (len(fused), codec.n_cells, codec.content_channels)
    x_T = None
    if cfg.init == "fused":
        seen = np.stack([f.known for f in fused])[..., None]
        last = cond[..., :codec.content_channels]
        noise = rng.standard_normal(shape)
        x_T = np.where(seen, dm.forward_noise(last, np.full(len(fused), sched.T), noise, sched), noise)
    elif cfg.init != "noise":
        raise ValueError(f"unknown sampler init {cfg.init!r}")
    x = dm.sample(eps_fn, shape, sched, sampler="ddim", ddim_steps=cfg.ddim_steps,
                  rng=rng, clip=cfg.clip, callback=clamp, x_T=x_T)
    out = []
    for b, (f, tmpl) in enumerate(zip(fused, templates)):
        xb = np.where(mask[b], known_x[b], x[b])
        xb = _suppress_seen(codec, f, xb)
        d = codec.decode_state(xb, tmpl)
        state = _place_vanished(codec, f, xb, d) if d.vanished else d.state
        out.append(Estimate(replace(state, turn=tmpl.turn), d.valid, xb))
    return out


def _place_vanished(codec: StateCodec, fused: FusedGrid, x: np.ndarray, decoded) -> gw.GridState:
    """Move pieces the sample lost off freshly seen cells.

    Decoding leaves a vanished piece at its template location, which may be a
    cell the agent has just seen holding something else.  Such pieces go to
    the free, not freshly seen cell where their channel is strongest.
    """
    state = decoded.state
    taken = set(state.location)
    loc = list(state.location)
    occupied = {}
    for p, c in enumerate(loc):
        occupied.setdefault(c, []).append(p)
    for p in decoded.vanished:
        c = loc[p]
        clash = fused.fresh[c] or len(occupied[c]) > 1
        if not clash:
            continue
        free = [k for k in range(codec.n_cells) if k not in taken and not fused.fresh[k]]
        if not free:
            continue
        best = max(free, key=lambda k: x[k, 1 + p])
        occupied[c].remove(p)
        loc[p] = best
        taken.add(best)
    return replace(state, location=tuple(loc))


def _suppress_seen(codec: StateCodec, fused: FusedGrid, x: np.ndarray) -> np.ndarray:
    """A piece seen fresh cannot also sit elsewhere: zero its channels off the seen cell."""
    x = x.copy()
    P = codec.n_pieces
    for c in np.flatnonzero(fused.fresh & (fused.content >= 0)):
        p = fused.content[c]
        chans = [1 + p] + ([1 + P + p] if codec.cuttable else [])
        keep = x[c].copy()
        x[:, chans] = -1.0
        x[c] = keep
    return x


def estimate(model: InpainterModel | None, fused: FusedGrid, template: gw.GridState,
             rng: np.random.Generator, oracle: gw.GridState | None = None) -> Estimate:
    """Complete ``fused`` into a state.

    ``template`` supplies static episode facts (piece attributes, goal boxes).
    Passing ``oracle`` bypasses the model and returns that state (test hook).
    """
    if oracle is not None:
        return Estimate(oracle, True)
    if model is None:
        raise ValueError("no inpainter given and no oracle state")
    return estimate_batch(model, [fused], [template], rng)[0]


# ---------------------------------------------------------------------------
# data

def observation_examples(states: Sequence[gw.GridState], agents: Sequence[int] | None = None) -> list:
    """(fused view, true state) pairs along one trajectory, for each agent."""
    if not states:
        return []
    n = states[0].n_agents
    agents = range(n) if agents is None else agents
    out = []
    n_cells = states[0].layout.n_cells
    for i in agents:
        history = []
        for s in states:
            history.append(gw.observe(s, i))
            out.append(InpaintExample(fuse(history, n_cells), s))
    return out


def masked_examples(states: Sequence[gw.GridState], fractions: Sequence[float],
                    rng: np.random.Generator) -> list:
    """Fresh views with a uniformly random known-cell subset of the given sizes."""
    out = []
    for s in states:
        n = s.layout.n_cells
        for f in fractions:
            known = np.zeros(n, dtype=bool)
            known[rng.permutation(n)[: int(round(f * n))]] = True
            out.append(InpaintExample(fused_from_state(s, 0, known), s))
    return out


def reconstruction_accuracy(model: InpainterModel, examples: Sequence[InpaintExample],
                            seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    est = estimate_batch(model, [e.fused for e in examples], [e.state for e in examples], rng)
    exact = np.mean([a.state.same_dynamics(e.state) for a, e in zip(est, examples)])
    valid = np.mean([a.valid for a in est])
    cell_hits, cell_total = 0, 0
    for a, e in zip(est, examples):
        unk = ~e.fused.fresh
        cell_hits += int(np.sum((np.array(a.state.cells) == np.array(e.state.cells))[unk]))
        cell_total += int(unk.sum())
    return {"exact": float(exact), "valid": float(valid),
            "uncertain_cell_accuracy": cell_hits / max(cell_total, 1), "n": len(examples)}
