"""Data collection, training pipeline, episode evaluation and metrics."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cwm as cw
from . import gridworld as gw
from . import perception as pc
from . import planner as pl
from .config import ExperimentConfig

log = logging.getLogger(__name__)

DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class TrainingStageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"training stage {stage!r} failed: {err}")
        self.stage = stage


# ---------------------------------------------------------------------------
# episodes and datasets

@dataclass
class EpisodeRecord:
    """One scripted rollout: the initial state plus the executed joint actions."""

    seed: int
    kinds: tuple
    initial: gw.GridState
    actions: list
    split: str = "train"

    @property
    def steps(self) -> int:
        return len(self.actions)

    def states(self) -> list:
        out = [self.initial]
        for joint in self.actions:
            out.append(gw.step(out[-1], joint))
        return out

    @property
    def success(self) -> bool:
        return gw.is_success(self.states()[-1])

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "kinds": list(self.kinds), "split": self.split,
                           "initial": self.initial.to_dict(),
                           "actions": [[a.to_list() for a in j] for j in self.actions]},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        d = json.loads(line)
        return cls(d["seed"], tuple(d["kinds"]), gw.GridState.from_dict(d["initial"]),
                   [tuple(gw.Action.from_list(a) for a in j) for j in d["actions"]], d["split"])


def _split_of(index: int, n: int, val: float, test: float) -> str:
    n_test = int(round(n * test))
    n_val = int(round(n * val))
    if index >= n - n_test:
        return "test"
    if index >= n - n_test - n_val:
        return "val"
    return "train"


def play_scripted(config: gw.EpisodeConfig, kinds: Sequence[str], epsilon: float,
                  rng: np.random.Generator, horizon: int | None = None) -> tuple:
    state = gw.new_game(config)
    pols = [(lambda s, i, k=k: gw.noisy_policy(k, s, i, rng, epsilon)) for k in kinds]
    return gw.rollout(state, pols, horizon)


def collect(env: gw.EpisodeConfig, n_episodes: int, seed: int = 0, epsilon: float = 0.1,
            kinds: Sequence[str] = (), val_fraction: float = 0.1,
            test_fraction: float = 0.1) -> "Dataset":
    """Scripted rollouts with random-action injection; each agent's kind drawn per episode."""
    if n_episodes < 0:
        raise DatasetError("n_episodes must be non-negative")
    pool = tuple(kinds) or gw.default_kinds(env.variant)
    episodes = []
    for i in range(n_episodes):
        ep_seed = seed * 1_000_003 + i
        rng = np.random.default_rng(ep_seed)
        ks = tuple(pool[int(rng.integers(len(pool)))] for _ in range(env.n_agents))
        states, actions = play_scripted(env.with_seed(ep_seed), ks, epsilon, rng)
        episodes.append(EpisodeRecord(ep_seed, ks, states[0], actions,
                                      _split_of(i, n_episodes, val_fraction, test_fraction)))
    meta = {"seed": seed, "epsilon": epsilon, "kinds": list(pool),
            "val_fraction": val_fraction, "test_fraction": test_fraction}
    return Dataset(replace(env, seed=0), episodes, meta)


@dataclass
class Dataset:
    env: gw.EpisodeConfig
    episodes: list
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return [e for e in self.episodes if e.split == name]

    def manifest(self) -> dict:
        counts = {s: len(self.split(s)) for s in SPLITS}
        return {"version": DATASET_VERSION, "config": self.env.to_dict(), "meta": self.meta,
                "episodes": len(self.episodes),
                "transitions": sum(e.steps for e in self.episodes),
                "splits": counts,
                "seeds": {s: [e.seed for e in self.split(s)] for s in SPLITS}}

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        body = "".join(e.to_json() + "\n" for e in self.episodes)
        (path / "episodes.jsonl").write_text(body)
        man = self.manifest()
        man["sha256"] = hashlib.sha256(body.encode()).hexdigest()
        (path / "manifest.json").write_text(json.dumps(man, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        try:
            man = json.loads((path / "manifest.json").read_text())
            body = (path / "episodes.jsonl").read_text()
        except FileNotFoundError as err:
            raise DatasetError(f"incomplete dataset at {path}: {err}") from err
        if man.get("version") != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version {man.get('version')}")
        if man.get("sha256") and hashlib.sha256(body.encode()).hexdigest() != man["sha256"]:
            raise DatasetError("episode file does not match its manifest checksum")
        episodes = [EpisodeRecord.from_json(l) for l in body.splitlines() if l.strip()]
        ds = cls(gw.EpisodeConfig.from_dict(man["config"]), episodes, man.get("meta", {}))
        ds.verify(man)
        return ds

    def verify(self, manifest: dict | None = None) -> None:
        seeds = {s: {e.seed for e in self.split(s)} for s in SPLITS}
        for a in SPLITS:
            for b in SPLITS:
                if a < b and seeds[a] & seeds[b]:
                    raise DatasetError(f"splits {a} and {b} share episode seeds")
        if manifest is not None:
            mine = self.manifest()
            for key in ("episodes", "transitions", "splits"):
                if manifest.get(key) != mine[key]:
                    raise DatasetError(f"manifest {key} {manifest.get(key)} != contents {mine[key]}")

    # derived tables ------------------------------------------------------------
    def trajectories(self, split: str) -> list:
        return [(e, e.states()) for e in self.split(split)]

    def transitions(self, split: str) -> list:
        out = []
        for e, states in self.trajectories(split):
            for s, j, s2 in zip(states[:-1], e.actions, states[1:]):
                out.append(cw.TransitionSample(s, tuple(j), s2))
        return out

    def single_transitions(self, split: str) -> list:
        """Wait-padded one-agent counterfactuals, plus the all-wait transitions."""
        out = []
        for t in self.transitions(split):
            out.extend(cw.single_agent_views(t) if t.acting else [t])
        return out

    def joint_transitions(self, split: str, min_acting: int = 2) -> list:
        return [t for t in self.transitions(split) if len(t.acting) >= min_acting]


def proposer_rows(trajectories: Sequence, table: pl.ActionTable) -> tuple:
    """Features and multi-hot labels: scripted choices plus strictly improving legal actions."""
    X, Y = [], []
    for e, states in trajectories:
        kinds = gw.default_kinds(e.initial.config.variant)
        for s in states:
            if gw.is_success(s):
                continue
            h0 = gw.heuristic_steps_left(s)
            for i in range(s.n_agents):
                y = np.zeros(table.size)
                for k in kinds:
                    y[table.index(gw.cooperator_policy(k, s, i))] = 1.0
                for a in gw.legal_actions(s, i):
                    if gw.heuristic_steps_left(pl.one_step_outcome(s, i, a)) < h0:
                        y[table.index(a)] = 1.0
                X.append(pl.proposer_features(s, i))
                Y.append(y)
    return np.array(X), np.array(Y)


def intent_rows(trajectories: Sequence, table: pl.ActionTable, k: int = 3) -> tuple:
    """Stacked recent states and the other agent's scripted (noise-free) action."""
    X, labels = [], []
    for e, states in trajectories:
        for t, s in enumerate(states):
            hist = states[max(0, t - k + 1): t + 1]
            for i in range(s.n_agents):
                for j in range(s.n_agents):
                    if i == j:
                        continue
                    X.append(pl.intent_features(hist, k, i, j))
                    labels.append(table.index(gw.cooperator_policy(e.kinds[j], s, j)))
    return np.array(X), np.array(labels)


def evaluator_rows(trajectories: Sequence) -> tuple:
    F, y = [], []
    for _, states in trajectories:
        for s in states:
            F.append(pl.piece_features(s))
            y.append(pl.capped_heuristic(s))
    return np.array(F), np.array(y)


def inpainter_rows(trajectories: Sequence) -> list:
    out = []
    for _, states in trajectories:
        out.extend(pc.observation_examples(states))
    return out


# ---------------------------------------------------------------------------
# checkpoint bundles

@dataclass
class Bundle:
    env: gw.EpisodeConfig
    cwm: cw.CWM | None = None
    inpainter: pc.InpainterModel | None = None
    heads: pl.SubmoduleHeads | None = None
    metrics: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        if self.cwm is not None:
            self.cwm.save(path / "cwm")
        if self.inpainter is not None:
            self.inpainter.save(path / "inpainter")
        if self.heads is not None:
            self.heads.save(path / "heads")
        (path / "bundle.json").write_text(json.dumps({"env": self.env.to_dict(),
                                                      "metrics": self.metrics}, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "Bundle":
        path = Path(path)
        if not (path / "bundle.json").exists():
            raise FileNotFoundError(f"no bundle at {path}")
        meta = json.loads((path / "bundle.json").read_text())
        env = gw.EpisodeConfig.from_dict(meta["env"])
        b = cls(env, metrics=meta.get("metrics", {}))
        if (path / "cwm").exists():
            b.cwm = cw.CWM.load(path / "cwm")
        if (path / "inpainter").exists():
            b.inpainter = pc.InpainterModel.load(path / "inpainter")
        if (path / "heads").exists():
            b.heads = pl.SubmoduleHeads.load(path / "heads", env)
        return b


def _stage(name: str, fn: Callable):
    t0 = time.time()
    try:
        out = fn()
    except Exception as err:
        raise TrainingStageError(name, err) from err
    log.info("stage %s finished in %.1fs", name, time.time() - t0)
    return out


def head_metrics(heads: pl.SubmoduleHeads, trajectories: Sequence, P: int = 3) -> dict:
    """Held-out proposer recall, intent accuracy and evaluator error / ranking."""
    out = {}
    if not trajectories:
        return out
    if heads.proposer is not None:
        X, Y = proposer_rows(trajectories, heads.table)
        if len(X):
            logits = heads.proposer.logits(X)
            top = np.argsort(-logits, axis=1)[:, :P]
            out["proposer_hit_at_p"] = float(np.mean([Y[r, top[r]].any() for r in range(len(X))]))
    if heads.intent is not None:
        X, lab = intent_rows(trajectories, heads.table, heads.k)
        if len(X):
            out["intent_accuracy"] = float(np.mean(np.argmax(heads.intent.logits(X), 1) == lab))
    if heads.evaluator is not None:
        F, y = evaluator_rows(trajectories)
        pred = heads.evaluator.predict(F)
        out["evaluator_mae"] = float(np.mean(np.abs(pred - y)))
        rng = np.random.default_rng(0)
        a, b = rng.integers(len(y), size=(2, 2000))
        keep = y[a] != y[b]
        out["evaluator_rank_agreement"] = float(np.mean(
            np.sign(pred[a] - pred[b])[keep] == np.sign(y[a] - y[b])[keep]))
    return out


def train_heads(train_traj: Sequence, env: gw.EpisodeConfig, cfg: pl.HeadConfig, k: int = 3,
                logger: Callable | None = None, steps: dict | None = None) -> pl.SubmoduleHeads:
    table = pl.enumerate_action_space(env)
    heads = pl.SubmoduleHeads(table, k=k)
    steps = steps or {}
    X, Y = proposer_rows(train_traj, table)
    heads.proposer = pl.ProposerHead.build(table, X.shape[2], cfg)
    heads.history["proposer"] = heads.proposer.fit(
        X, Y, replace(cfg, steps=steps.get("proposer", cfg.steps)), logger)
    X, lab = intent_rows(train_traj, table, k)
    heads.intent = pl.IntentHead.build(table, X.shape[2], cfg)
    heads.history["intent"] = heads.intent.fit(
        X, lab, replace(cfg, steps=steps.get("intent", cfg.steps)), logger)
    F, y = evaluator_rows(train_traj)
    heads.evaluator = pl.EvaluatorHead.build(F.shape[2], cfg)
    heads.history["evaluator"] = heads.evaluator.fit(
        F, y, replace(cfg, steps=steps.get("evaluator", cfg.steps)), logger)
    return heads


def train_all(dataset: Dataset, config: ExperimentConfig, logger: Callable | None = None,
              eval_limit: int = 300) -> Bundle:
    """Stage-one and stage-two world model, inpainter and the three planning heads."""
    env = dataset.env
    train_traj = dataset.trajectories("train")
    val_traj = dataset.trajectories("val")
    singles = dataset.single_transitions("train")
    joints = dataset.joint_transitions("train")
    model = _stage("cwm_stage1", lambda: cw.train_stage1(singles, config.cwm, env, logger))
    if joints:
        model = _stage("cwm_stage2", lambda: cw.train_stage2(model, joints, config.cwm,
                                                             replay=singles, log=logger))
    inp = _stage("inpainter", lambda: pc.train_inpainter(inpainter_rows(train_traj),
                                                         config.inpainter, env, logger))
    heads = _stage("heads", lambda: train_heads(train_traj, env, config.heads,
                                                config.planner.k, logger))
    bundle = Bundle(env, model, inp, heads)
    metrics: dict = {"sizes": {"single": len(singles), "joint": len(joints),
                               "episodes": len(train_traj)}}
    val_single = dataset.single_transitions("val")[:eval_limit]
    val_joint = dataset.joint_transitions("val")[:eval_limit]
    if val_single:
        metrics["cwm_single"] = cw.exact_match_accuracy(model, val_single, "single").accuracy
    if val_joint:
        metrics["cwm_joint"] = cw.exact_match_accuracy(model, val_joint, "joint").accuracy
    rows = inpainter_rows(val_traj)[:eval_limit]
    if rows:
        metrics["inpainter"] = pc.reconstruction_accuracy(inp, rows)
    metrics.update(head_metrics(heads, val_traj, config.planner.P))
    bundle.metrics = metrics
    return bundle


# ---------------------------------------------------------------------------
# episodes

class ScriptedAgent:
    def __init__(self, kind: str):
        self.kind = kind

    def act(self, obs, state: gw.GridState) -> gw.Action:
        return gw.cooperator_policy(self.kind, state, obs.agent)


class WaitAgent:
    def act(self, obs, state) -> gw.Action:
        return gw.WAIT


class ComboAgent:
    def __init__(self, controller: pl.Controller):
        self.controller = controller

    def act(self, obs, state) -> gw.Action:
        return self.controller.act(obs, state)


def make_controller(agent: int, template: gw.GridState, cfg: pl.PlannerConfig,
                    bundle: Bundle | None, partner_kinds: Sequence | None = None,
                    world: str = "learned", seed: int = 0, keep_trace: bool = False) -> pl.Controller:
    """A planning agent wired to learned and/or oracle parts.

    ``world`` is ``learned`` (the bundle's world model) or ``simulator``.
    ``partner_kinds[j]`` backs oracle intents.
    """
    if world == "simulator":
        wm = pl.SimulatorWorld()
    else:
        if bundle is None or bundle.cwm is None:
            raise ValueError("learned world model requested but the bundle has none")
        wm = pl.LearnedWorld(bundle.cwm, cfg.omega)
    oracle = None
    if partner_kinds is not None:
        oracle = lambda s, j: gw.cooperator_policy(partner_kinds[j], s, j)
    heads = bundle.heads if bundle is not None else None
    planner = pl.Planner(agent, cfg, wm, heads, pl.enumerate_action_space(template.config), oracle)
    inp = bundle.inpainter if (bundle is not None and cfg.perception == "learned") else None
    if cfg.perception == "learned" and inp is None:
        raise ValueError("learned perception requested but the bundle has no inpainter")
    return pl.Controller(agent, template, planner, inp, seed=seed, keep_trace=keep_trace)


@dataclass
class EpisodeOutcome:
    seed: int
    success: bool
    steps: int
    kinds: tuple
    guard_fires: int = 0
    illegal: int = 0
    seconds: float = 0.0
    trace: list = field(default_factory=list)

    def record(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        return d


def run_episode(config: gw.EpisodeConfig, agents: Sequence, horizon: int | None = None) -> tuple:
    """Play until success or horizon; illegal choices are replaced by wait.

    Returns ``(outcome, states)``.
    """
    t0 = time.time()
    horizon = config.horizon if horizon is None else horizon
    state = gw.new_game(config)
    states = [state]
    illegal = 0
    while not gw.is_success(state) and state.turn < horizon:
        joint = []
        for i, ag in enumerate(agents):
            a = ag.act(gw.observe(state, i), state)
            if not gw.is_legal(state, i, a):
                illegal += 1
                a = gw.WAIT
            joint.append(a)
        state = gw.step(state, tuple(joint))
        states.append(state)
    fires = sum(ag.controller.guard_fires for ag in agents if isinstance(ag, ComboAgent))
    trace = []
    for ag in agents:
        if isinstance(ag, ComboAgent):
            trace.extend(ag.controller.trace_records())
    kinds = tuple(getattr(ag, "kind", "combo") for ag in agents)
    out = EpisodeOutcome(config.seed, gw.is_success(state), state.turn, kinds, fires, illegal,
                         round(time.time() - t0, 2), trace)
    return out, states


@dataclass
class MetricsReport:
    label: str
    episodes: list
    extras: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return float(np.mean([e["success"] for e in self.episodes])) if self.episodes else 0.0

    @property
    def avg_steps(self) -> float:
        steps = [e["steps"] for e in self.episodes if e["success"]]
        return float(np.mean(steps)) if steps else float("nan")

    @property
    def guard_fires(self) -> int:
        return int(sum(e.get("guard_fires", 0) for e in self.episodes))

    def summary(self) -> dict:
        return {"label": self.label, "episodes": len(self.episodes),
                "success_rate": self.success_rate, "avg_steps": self.avg_steps,
                "guard_fires": self.guard_fires, **self.extras}

    def records(self) -> list:
        return [json.dumps({"label": self.label, **e}) for e in self.episodes] + \
               [json.dumps({"summary": self.summary()})]

    def table(self) -> str:
        s = self.summary()
        return (f"{'run':<28}{'episodes':>9}{'success':>9}{'avg steps':>11}\n"
                f"{s['label']:<28}{s['episodes']:>9}{s['success_rate']:>9.2f}{s['avg_steps']:>11.2f}")

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.records()) + "\n")


def evaluate(bundle: Bundle | None, kind: str, n_episodes: int, horizon: int,
             planner_cfg: pl.PlannerConfig, env: gw.EpisodeConfig, seed: int = 1000,
             world: str = "learned", label: str | None = None,
             keep_trace: bool = False, progress: Callable | None = None) -> MetricsReport:
    """Planning agent as agent 0, scripted ``kind`` cooperators as all others."""
    episodes = []
    for e in range(n_episodes):
        cfg = env.with_seed(seed + e)
        template = gw.new_game(cfg)
        kinds = tuple([None] + [kind] * (env.n_agents - 1))
        ctrl = make_controller(0, template, planner_cfg, bundle, kinds, world,
                               seed=seed + e, keep_trace=keep_trace)
        agents = [ComboAgent(ctrl)] + [ScriptedAgent(kind) for _ in range(env.n_agents - 1)]
        out, _ = run_episode(cfg, agents, horizon)
        rec = out.record()
        if keep_trace:
            rec["trace"] = out.trace
        episodes.append(rec)
        if progress:
            progress(rec)
    return MetricsReport(label or f"combo-vs-{kind}", episodes)


# ---------------------------------------------------------------------------
# brute-force references

def optimal_steps(state: gw.GridState, partner_kinds: Sequence | None = None,
                  controlled: int = 0, limit: int = 40) -> int | None:
    """Fewest joint steps to success by breadth-first search.

    With ``partner_kinds`` every agent except ``controlled`` follows its
    scripted policy and only the controlled agent's choice branches; without
    it all agents branch.
    """
    start = state
    seen = {start.key()}
    frontier = deque([(start, 0)])
    while frontier:
        s, d = frontier.popleft()
        if gw.is_success(s):
            return d
        if d >= limit:
            continue
        per_agent = []
        for i in range(s.n_agents):
            if partner_kinds is not None and i != controlled:
                per_agent.append([gw.cooperator_policy(partner_kinds[i], s, i)])
            else:
                per_agent.append(sorted(gw.legal_actions(s, i)))
        for joint in _product(per_agent):
            nxt = gw.step(s, joint)
            key = nxt.key()
            if key not in seen:
                seen.add(key)
                frontier.append((nxt, d + 1))
    return None


def _product(lists: Sequence) -> list:
    out = [()]
    for options in lists:
        out = [prefix + (a,) for prefix in out for a in options]
    return out
