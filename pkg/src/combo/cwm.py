"""Compositional world model over gridworld states.

A state is a grid of cells (board cells, then one hand cell per agent) whose
content is one-hot encoded and mapped to ``[-1, 1]``.  The diffusion model
generates only the content channels of the next state; fixture channels
(goal boxes, cutting board, hands, passing cells) are static and enter as
conditioning.  A joint action is factorized into one condition vector per
agent and the per-agent noise predictions are composed at sampling time.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffusion as dm
from . import gridworld as gw
from . import tinynet as tn

N_VERBS = len(gw.Verb)
N_FIXTURES = 4   # goal box, cutting board, hand cell, passing cell


class DecodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# encodings

@dataclass(frozen=True)
class StateCodec:
    """Tensor layout for one environment shape (variant, agents, board, pieces)."""

    variant: str
    n_agents: int
    height: int
    width: int
    n_pieces: int

    @classmethod
    def for_config(cls, config: gw.EpisodeConfig) -> "StateCodec":
        return cls(config.variant, config.n_agents, config.height, config.width, config.n_pieces)

    @property
    def n_board(self) -> int:
        return self.height * self.width

    @property
    def n_cells(self) -> int:
        return self.n_board + self.n_agents

    @property
    def cuttable(self) -> bool:
        return self.variant == gw.COOK

    @property
    def content_channels(self) -> int:
        """Empty, one channel per piece, and (cook) one per cut piece."""
        return 1 + self.n_pieces * (2 if self.cuttable else 1)

    @property
    def channels(self) -> int:
        return self.content_channels + N_FIXTURES

    # action-vector blocks: agent | verb | piece (+none) | target cell (+none)
    @property
    def verb_offset(self) -> int:
        return self.n_agents

    @property
    def piece_offset(self) -> int:
        return self.n_agents + N_VERBS

    @property
    def target_offset(self) -> int:
        return self.piece_offset + self.n_pieces + 1

    @property
    def action_dim(self) -> int:
        return self.target_offset + self.n_board + 1

    # states ---------------------------------------------------------------
    def content_ids(self, s: gw.GridState) -> np.ndarray:
        """Per-cell content channel index."""
        ids = np.zeros(self.n_cells, dtype=np.int16)
        for p, c in enumerate(s.location):
            ids[c] = 1 + p + (self.n_pieces if self.cuttable and s.pieces[p].cut else 0)
        return ids

    def fixture_flags(self, s: gw.GridState) -> np.ndarray:
        f = np.zeros((self.n_cells, N_FIXTURES), dtype=bool)
        for slot in s.slots:
            f[slot.cell, 0] = True
        if s.cutting_board is not None:
            f[s.cutting_board, 1] = True
        f[self.n_board:, 2] = True
        for c in s.layout.shared_cells:
            f[c, 3] = True
        return f

    def content_from_ids(self, ids: np.ndarray) -> np.ndarray:
        """(..., N) channel ids -> (..., N, Kc) in {-1, +1}."""
        out = -np.ones(ids.shape + (self.content_channels,))
        np.put_along_axis(out, ids[..., None].astype(np.int64), 1.0, axis=-1)
        return out

    def encode_content(self, s: gw.GridState) -> np.ndarray:
        return self.content_from_ids(self.content_ids(s))

    def encode_state(self, s: gw.GridState) -> np.ndarray:
        self.check(s)
        fx = np.where(self.fixture_flags(s), 1.0, -1.0)
        return np.concatenate([self.encode_content(s), fx], axis=-1)

    def check(self, s: gw.GridState):
        if StateCodec.for_config(s.config) != self:
            raise ValueError("state does not match this codec's environment shape")

    def decode_state(self, x: np.ndarray, template: gw.GridState) -> "Decoded":
        """Per-cell argmax over content channels, then validity repair.

        A piece claimed by several cells stays at the strongest one and the
        others become empty.  A piece claimed nowhere keeps its template
        location and the result is flagged invalid.
        """
        x = np.asarray(x, dtype=float)
        x = x[..., : self.content_channels] if x.shape[-1] >= self.content_channels else x
        if x.shape != (self.n_cells, self.content_channels):
            raise DecodeError(f"expected ({self.n_cells}, {self.content_channels}) content, got {x.shape}")
        if np.all(np.isnan(x)):
            raise DecodeError("cannot decode an all-NaN tensor")
        x = np.nan_to_num(x, nan=-np.inf)
        ch = np.argmax(x, axis=-1)
        strength = np.max(x, axis=-1)
        P = self.n_pieces
        best: dict[int, tuple[float, int, bool]] = {}
        duplicates = 0
        for cell, c in enumerate(ch):
            if c == 0:
                continue
            p = (c - 1) % P
            is_cut = self.cuttable and c > P
            if p in best:
                duplicates += 1
                if strength[cell] <= best[p][0]:
                    continue
            best[p] = (strength[cell], cell, is_cut)
        loc = list(template.location)
        pieces = list(template.pieces)
        vanished = []
        for p in range(P):
            if p in best:
                _, cell, is_cut = best[p]
                loc[p] = cell
                if self.cuttable:
                    pieces[p] = replace(pieces[p], cut=is_cut)
            else:
                vanished.append(p)
        state = replace(template, location=tuple(loc), pieces=tuple(pieces), turn=template.turn + 1)
        valid = not vanished and len(set(loc)) == P
        return Decoded(state, valid, duplicates, tuple(vanished))

    # actions --------------------------------------------------------------
    def encode_action(self, agent: int, action: gw.Action) -> np.ndarray:
        if not 0 <= agent < self.n_agents:
            raise IndexError(f"agent {agent} out of range")
        v = np.zeros(self.action_dim)
        v[agent] = 1.0
        v[self.verb_offset + int(action.verb)] = 1.0
        v[self.piece_offset + (self.n_pieces if action.piece is None else action.piece)] = 1.0
        v[self.target_offset + (self.n_board if action.target is None else action.target)] = 1.0
        return v

    def decode_action(self, v: np.ndarray) -> tuple[int, gw.Action]:
        v = np.asarray(v)
        agent = int(np.argmax(v[: self.n_agents]))
        verb = gw.Verb(int(np.argmax(v[self.verb_offset: self.piece_offset])))
        piece = int(np.argmax(v[self.piece_offset: self.target_offset]))
        target = int(np.argmax(v[self.target_offset:]))
        return agent, gw.Action(verb, None if piece == self.n_pieces else piece,
                                None if target == self.n_board else target)

    def null_vector(self) -> np.ndarray:
        return np.zeros(self.action_dim)

    def factorize(self, joint: Sequence[gw.Action]) -> np.ndarray:
        """One condition vector per agent, in agent order, waits included."""
        if len(joint) != self.n_agents:
            raise ValueError(f"joint action has {len(joint)} parts, expected {self.n_agents}")
        return np.stack([self.encode_action(i, a) for i, a in enumerate(joint)])

    # derived condition maps -----------------------------------------------
    def spatial_maps(self, layout: gw.Layout) -> np.ndarray:
        """(A, N * m) linear action-to-cell maps.

        Channels: target cell, actor hand, actor region, then the verb and
        piece blocks broadcast to every cell.
        """
        n = self.n_cells
        m = np.zeros((self.action_dim, n, self.n_spatial))
        for c in range(self.n_board):
            m[self.target_offset + c, c, 0] = 1.0
        for i in range(self.n_agents):
            m[i, layout.hand_cell(i), 1] = 1.0
            m[i, sorted(layout.regions[i]), 2] = 1.0
        for j in range(N_VERBS + self.n_pieces + 1):
            m[self.verb_offset + j, :, 3 + j] = 1.0
        return m.reshape(self.action_dim, n * self.n_spatial)

    @property
    def n_spatial(self) -> int:
        return 3 + N_VERBS + self.n_pieces + 1

    def referent(self) -> tuple:
        """Piece block -> content channels that hold that piece."""
        P = self.n_pieces
        sel = np.zeros((P + 1, self.channels))
        for p in range(P):
            sel[p, 1 + p] = 1.0
            if self.cuttable:
                sel[p, 1 + P + p] = 1.0
        return self.piece_offset, self.target_offset, sel


@dataclass(frozen=True)
class Decoded:
    state: gw.GridState
    valid: bool
    duplicates: int = 0
    vanished: tuple = ()


def encode_state(s: gw.GridState) -> np.ndarray:
    return StateCodec.for_config(s.config).encode_state(s)


def decode_state(x: np.ndarray, template: gw.GridState) -> Decoded:
    return StateCodec.for_config(template.config).decode_state(x, template)


def factorize(joint: Sequence[gw.Action], config: gw.EpisodeConfig) -> np.ndarray:
    return StateCodec.for_config(config).factorize(joint)


# ---------------------------------------------------------------------------
# transition data

@dataclass(frozen=True)
class TransitionSample:
    state: gw.GridState
    joint: tuple
    next_state: gw.GridState

    @property
    def acting(self) -> tuple:
        return tuple(i for i, a in enumerate(self.joint) if a.verb != gw.Verb.WAIT)

    @classmethod
    def from_step(cls, state: gw.GridState, joint: Sequence[gw.Action]) -> "TransitionSample":
        joint = gw.resolve_conflicts(tuple(joint))
        return cls(state, joint, gw.step(state, joint))


def single_agent_views(sample: TransitionSample) -> list:
    """Counterfactual transitions in which one acting agent moves and the rest wait."""
    out = []
    n = sample.state.n_agents
    for i in sample.acting:
        joint = tuple(a if j == i else gw.WAIT for j, a in enumerate(sample.joint))
        out.append(TransitionSample(sample.state, joint, gw.step(sample.state, joint)))
    return out


def wait_transition(state: gw.GridState) -> TransitionSample:
    joint = (gw.WAIT,) * state.n_agents
    return TransitionSample(state, joint, gw.step(state, joint))


@dataclass
class EncodedSet:
    """Compact arrays for a list of transitions (content ids + fixture flags)."""

    x0_ids: np.ndarray        # (M, N)
    fixtures: np.ndarray      # (M, N, F) bool
    next_ids: np.ndarray      # (M, N)
    actions: np.ndarray       # (M, n, A) full factorization
    acting: np.ndarray        # (M, n) bool
    weights: np.ndarray       # (M, n, N) ADLS rows per agent
    samples: list

    def __len__(self) -> int:
        return len(self.samples)


def adls_rows(layout: gw.Layout, inside: float = 2.0, outside: float = 1.0) -> np.ndarray:
    regions = [set(layout.regions[i]) | {layout.hand_cell(i)} for i in range(layout.n_agents)]
    return dm.LossScaleMatrix.from_regions(layout.n_cells, regions, inside, outside).coef


def encode_samples(codec: StateCodec, samples: Sequence[TransitionSample],
                   adls_inside: float = 2.0) -> EncodedSet:
    if not samples:
        raise ValueError("no transitions to encode")
    rows_cache: dict = {}
    x0, fx, nx, acts, acting, w = [], [], [], [], [], []
    for s in samples:
        x0.append(codec.content_ids(s.state))
        fx.append(codec.fixture_flags(s.state))
        nx.append(codec.content_ids(s.next_state))
        acts.append(codec.factorize(s.joint))
        acting.append([a.verb != gw.Verb.WAIT for a in s.joint])
        key = (s.state.layout.shared, s.state.layout.regions)
        if key not in rows_cache:
            rows_cache[key] = adls_rows(s.state.layout, adls_inside)
        w.append(rows_cache[key])
    return EncodedSet(np.array(x0), np.array(fx), np.array(nx), np.array(acts),
                      np.array(acting), np.array(w), list(samples))


# ---------------------------------------------------------------------------
# model

@dataclass
class CWMConfig:
    arch: str = "cell"
    hidden: int = 96
    emb: int = 64
    depth: int = 3
    t_dim: int = 32
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    omega: float = 5.0
    sampler: str = "ddim"
    ddim_steps: int = 25
    clip: float | None = 1.0
    p_null: float = 0.1
    adls: bool = True
    adls_inside: float = 2.0
    lr: float = 1e-3
    lr_final: float = 1e-4
    batch: int = 64
    stage1_steps: int = 10000
    stage2_steps: int = 1000
    stage2_lr: float = 3e-4
    stage2_replay: float = 1.0      # weight of single-agent loss kept during stage two
    stage2_form: str = "guided"     # composite regressed in stage two: "guided" or "mean"
    init: str = "state"             # sampler start: the current "state" noised to T, or pure "noise"
    seed: int = 0

    def __post_init__(self):
        if self.stage2_form not in ("guided", "mean"):
            raise ValueError(f"unknown stage2_form {self.stage2_form!r}")
        if self.init not in ("state", "noise"):
            raise ValueError(f"unknown sampler init {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CWMConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Prediction:
    state: gw.GridState
    tensor: np.ndarray
    valid: bool


class CWM:
    """A trained (or training) compositional world model for one environment shape."""

    def __init__(self, env: gw.EpisodeConfig, config: CWMConfig, net: tn.Network | None = None,
                 stage: int = 0, history: dict | None = None):
        self.env = replace(env, seed=0)
        self.config = config
        self.codec = StateCodec.for_config(env)
        c = self.codec
        if net is None:
            arch = {"kind": config.arch, "cells": c.n_cells, "x_ch": c.content_channels,
                    "cond_ch": c.channels + c.n_spatial + 1, "vec_dim": c.action_dim,
                    "hidden": config.hidden, "emb": config.emb, "depth": config.depth,
                    "t_dim": config.t_dim}
            net = tn.Network(arch, seed=config.seed)
        self.net = net
        self.sched = dm.linear_schedule(config.T, config.beta_min, config.beta_max)
        self.stage = stage
        self.history = history or {"stage1": [], "stage2": []}
        self._models: dict = {}

    def model_for(self, layout: gw.Layout) -> dm.DenoiserModel:
        key = (layout.shared, layout.regions)
        if key not in self._models:
            self._models[key] = dm.DenoiserModel(self.net, self.codec.spatial_maps(layout),
                                                 self.codec.referent())
        return self._models[key]

    # batches ----------------------------------------------------------------
    def _cond(self, data: EncodedSet, idx: np.ndarray) -> np.ndarray:
        c = self.codec
        fx = np.where(data.fixtures[idx], 1.0, -1.0)
        return np.concatenate([c.content_from_ids(data.x0_ids[idx]), fx], axis=-1)

    def _groups(self, data: EncodedSet, idx: np.ndarray) -> list:
        """Split batch positions by layout (cook boards move the regions)."""
        groups: dict = {}
        for pos, j in enumerate(idx):
            lay = data.samples[j].state.layout
            groups.setdefault((lay.shared, lay.regions), (lay, []))[1].append(pos)
        return [(lay, np.array(ps)) for lay, ps in groups.values()]

    def single_loss(self, data: EncodedSet, idx: np.ndarray, agents: np.ndarray,
                    rng: np.random.Generator) -> tn.Tensor:
        total = None
        for lay, ps in self._groups(data, idx):
            js, ag = idx[ps], agents[ps]
            batch = {"target": self.codec.content_from_ids(data.next_ids[js]),
                     "cond": self._cond(data, js),
                     "action": data.actions[js, ag],
                     "agent": ag,
                     "weight": data.weights[js, ag] if self.config.adls else None}
            loss = dm.single_loss_tensor(self.model_for(lay), batch, None, self.sched, rng,
                                         self.config.p_null)
            loss = loss * (len(js) / len(idx))
            total = loss if total is None else total + loss
        return total

    def composed_loss(self, data: EncodedSet, idx: np.ndarray,
                      rng: np.random.Generator) -> tn.Tensor:
        total = None
        for lay, ps in self._groups(data, idx):
            js = idx[ps]
            batch = {"target": self.codec.content_from_ids(data.next_ids[js]),
                     "cond": self._cond(data, js), "actions": data.actions[js]}
            loss = dm.composed_loss_tensor(self.model_for(lay), batch, self.sched, rng,
                                           self.config.stage2_form)
            loss = loss * (len(js) / len(idx))
            total = loss if total is None else total + loss
        return total

    # sampling ---------------------------------------------------------------
    def predict(self, states: Sequence[gw.GridState], conds: Sequence[np.ndarray],
                rng: np.random.Generator, omega: float | None = None,
                batch: int = 256) -> list:
        """Composed next-state samples; ``conds[k]`` is (n_k, A) condition vectors."""
        omega = self.config.omega if omega is None else omega
        out: list = [None] * len(states)
        groups: dict = {}
        for k, (s, cv) in enumerate(zip(states, conds)):
            cv = np.atleast_2d(np.asarray(cv, dtype=float))
            lay = s.layout
            groups.setdefault((lay.shared, lay.regions, cv.shape[0]), []).append((k, cv))
        for key, items in groups.items():
            lay = states[items[0][0]].layout
            model = self.model_for(lay)
            for start in range(0, len(items), batch):
                chunk = items[start:start + batch]
                ks = [k for k, _ in chunk]
                cond = np.stack([self.codec.encode_state(states[k]) for k in ks])
                acts = np.stack([cv for _, cv in chunk])
                fn = dm.guided_eps_fn(model, cond, acts, omega)
                shape = (len(ks), self.codec.n_cells, self.codec.content_channels)
                x_T = None
                if self.config.init == "state":
                    current = cond[..., :self.codec.content_channels]
                    T = np.full(len(ks), self.sched.T)
                    x_T = dm.forward_noise(current, T, rng.standard_normal(shape), self.sched)
                x = dm.sample(fn, shape, self.sched, sampler=self.config.sampler,
                              ddim_steps=self.config.ddim_steps, rng=rng, clip=self.config.clip,
                              x_T=x_T)
                for k, xk in zip(ks, x):
                    d = self.codec.decode_state(xk, states[k])
                    out[k] = Prediction(d.state, xk, d.valid)
        return out

    def predict_next(self, state: gw.GridState, joint: Sequence[gw.Action],
                     rng: np.random.Generator, omega: float | None = None,
                     agents: Sequence[int] | None = None) -> Prediction:
        cv = self.codec.factorize(joint)
        if agents is not None:
            cv = cv[list(agents)]
        return self.predict([state], [cv], rng, omega)[0]

    # persistence --------------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        tn.save_file(self.net, path / "cwm.ckpt")
        meta = {"env": self.env.to_dict(), "config": self.config.to_dict(),
                "stage": self.stage, "history": self.history}
        (path / "cwm.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "CWM":
        path = Path(path)
        meta_file = path / "cwm.json"
        if not meta_file.exists():
            raise FileNotFoundError(f"no world-model checkpoint under {path}")
        meta = json.loads(meta_file.read_text())
        net = tn.load_file(path / "cwm.ckpt")
        return cls(gw.EpisodeConfig.from_dict(meta["env"]), CWMConfig.from_dict(meta["config"]),
                   net, meta["stage"], meta["history"])


def predict_next(model: CWM, state: gw.GridState, joint: Sequence[gw.Action],
                 rng: np.random.Generator, omega: float | None = None) -> Prediction:
    return model.predict_next(state, joint, rng, omega)


# ---------------------------------------------------------------------------
# training

def _lr(config_lr: float, final: float, step: int, total: int) -> float:
    frac = step / max(total - 1, 1)
    return final + 0.5 * (config_lr - final) * (1.0 + math.cos(math.pi * frac))


def _single_pairs(data: EncodedSet) -> tuple[np.ndarray, np.ndarray]:
    """(row, agent) pairs: the acting agent, or every agent for all-wait rows."""
    rows, agents = [], []
    for r in range(len(data)):
        act = np.flatnonzero(data.acting[r])
        if len(act) > 1:
            raise ValueError("stage-one data must have at most one acting agent per transition")
        for a in (act if len(act) else range(data.acting.shape[1])):
            rows.append(r)
            agents.append(a)
    return np.array(rows), np.array(agents)


def train_stage1(samples: Sequence[TransitionSample], config: CWMConfig,
                 env: gw.EpisodeConfig | None = None, log: Callable | None = None,
                 steps_per_epoch: int = 100) -> CWM:
    """Single-action training with ADLS weights and null-condition dropout."""
    if not samples:
        raise ValueError("stage one needs a non-empty dataset")
    env = env or samples[0].state.config
    cwm = CWM(env, config)
    data = encode_samples(cwm.codec, samples, config.adls_inside)
    rows, agents = _single_pairs(data)
    rng = np.random.default_rng(config.seed)
    opt = tn.Adam(lr=config.lr)
    running, t0 = [], time.time()
    for it in range(config.stage1_steps):
        pick = rng.integers(len(rows), size=config.batch)
        cwm.net.zero_grad()
        loss = cwm.single_loss(data, rows[pick], agents[pick], rng)
        loss.backward()
        opt.lr = _lr(config.lr, config.lr_final, it, config.stage1_steps)
        opt.step(cwm.net.params, cwm.net.grads())
        running.append(float(loss.data))
        if (it + 1) % steps_per_epoch == 0 or it + 1 == config.stage1_steps:
            entry = {"epoch": len(cwm.history["stage1"]) + 1, "step": it + 1,
                     "loss": float(np.mean(running)), "seconds": round(time.time() - t0, 1)}
            cwm.history["stage1"].append(entry)
            running = []
            if log:
                log("stage1", entry)
    cwm.stage = 1
    return cwm


def train_stage2(cwm: CWM | None, samples: Sequence[TransitionSample], config: CWMConfig | None = None,
                 replay: Sequence[TransitionSample] = (), log: Callable | None = None,
                 steps_per_epoch: int = 100) -> CWM:
    """Composed-loss fine-tuning on joint transitions with two or more actors.

    ``replay`` (single-agent transitions) keeps a weighted stage-one loss in
    the objective so single-action accuracy does not erode.
    """
    if cwm is None or cwm.stage < 1:
        raise ValueError("stage two needs a stage-one model")
    config = config or cwm.config
    if not samples:
        raise ValueError("stage two needs a non-empty dataset")
    data = encode_samples(cwm.codec, samples, config.adls_inside)
    if np.any(data.acting.sum(axis=1) < 2):
        raise ValueError("stage-two transitions need at least two acting agents")
    rep = encode_samples(cwm.codec, list(replay), config.adls_inside) if replay else None
    rep_pairs = _single_pairs(rep) if rep is not None else None
    rng = np.random.default_rng(config.seed + 1)
    opt = tn.Adam(lr=config.stage2_lr)
    running, t0 = [], time.time()
    for it in range(config.stage2_steps):
        idx = rng.integers(len(data), size=config.batch)
        cwm.net.zero_grad()
        loss = cwm.composed_loss(data, idx, rng)
        if rep_pairs is not None and config.stage2_replay > 0:
            pick = rng.integers(len(rep_pairs[0]), size=config.batch)
            loss = loss + cwm.single_loss(rep, rep_pairs[0][pick], rep_pairs[1][pick], rng) \
                * config.stage2_replay
        loss.backward()
        opt.lr = _lr(config.stage2_lr, config.lr_final, it, config.stage2_steps)
        opt.step(cwm.net.params, cwm.net.grads())
        running.append(float(loss.data))
        if (it + 1) % steps_per_epoch == 0 or it + 1 == config.stage2_steps:
            entry = {"epoch": len(cwm.history["stage2"]) + 1, "step": it + 1,
                     "loss": float(np.mean(running)), "seconds": round(time.time() - t0, 1)}
            cwm.history["stage2"].append(entry)
            running = []
            if log:
                log("stage2", entry)
    cwm.stage = 2
    return cwm


def clone(cwm: CWM) -> CWM:
    return CWM(cwm.env, cwm.config, cwm.net.copy(), cwm.stage,
               json.loads(json.dumps(cwm.history)))


# ---------------------------------------------------------------------------
# evaluation

def condition_sets(codec: StateCodec, samples: Sequence[TransitionSample], mode: str,
                   rng: np.random.Generator | None = None) -> list:
    """Condition vectors per sample.

    ``single``: the acting agent's vector (a random agent's wait if nobody acts);
    ``joint``: the full factorization, waits included;
    ``acting``: only the acting agents' vectors.
    """
    rng = rng or np.random.default_rng(0)
    out = []
    for s in samples:
        full = codec.factorize(s.joint)
        act = list(s.acting)
        if mode == "joint":
            out.append(full)
        elif mode in ("single", "acting"):
            if not act:
                act = [int(rng.integers(codec.n_agents))]
            if mode == "single" and len(act) > 1:
                raise ValueError("single mode needs single-agent transitions")
            out.append(full[act])
        else:
            raise ValueError(f"unknown condition mode {mode!r}")
    return out


@dataclass
class AccuracyReport:
    """Exact-match scores; ``accuracy`` counts a prediction only if it also decoded cleanly."""

    accuracy: float
    valid_rate: float
    n: int
    per_count: dict = field(default_factory=dict)
    repaired_accuracy: float = 0.0      # matches after the decoder restored vanished pieces


def exact_match_accuracy(cwm: CWM, samples: Sequence[TransitionSample], mode: str = "joint",
                         seed: int = 0, omega: float | None = None) -> AccuracyReport:
    """Fraction of valid decoded predictions equal to the simulator's next state."""
    rng = np.random.default_rng(seed)
    conds = condition_sets(cwm.codec, samples, mode, rng)
    preds = cwm.predict([s.state for s in samples], conds, rng, omega)
    match = np.array([p.state.same_dynamics(s.next_state) for p, s in zip(preds, samples)])
    valid = np.array([p.valid for p in preds])
    hits = match & valid
    per: dict = {}
    for h, s in zip(hits, samples):
        per.setdefault(len(s.acting), []).append(h)
    return AccuracyReport(float(hits.mean()), float(valid.mean()), len(samples),
                          {k: float(np.mean(v)) for k, v in sorted(per.items())},
                          float(match.mean()))
