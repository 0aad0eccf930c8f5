"""Beam-tree planning over a (learned or exact) world model.

Each planning call keeps ``B`` plans, expands every plan with ``P`` proposed
own actions joined with the inferred actions of the other agents, simulates
the joint action, scores the resulting state and repeats for ``D`` levels.
The first own action of the best plan is executed and the whole procedure
reruns on the next environment step.

Every sub-module (proposer, intent tracker, evaluator) has a learned mode
backed by a small supervised network and an oracle mode used for tests and
ablations.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import gridworld as gw
from . import tinynet as tn

log = logging.getLogger(__name__)

SCORE_CAP = 40.0   # evaluator labels are clipped here; also the score of hopeless states


# ---------------------------------------------------------------------------
# action table

@dataclass(frozen=True)
class ActionTable:
    """Fixed indexing of every action: wait, picks, places (piece-major), cuts."""

    actions: tuple

    @property
    def size(self) -> int:
        return len(self.actions)

    def index(self, action: gw.Action) -> int:
        return self._index[action]

    def __post_init__(self):
        object.__setattr__(self, "_index", {a: i for i, a in enumerate(self.actions)})

    def __len__(self) -> int:
        return len(self.actions)


def enumerate_action_space(config: gw.EpisodeConfig) -> ActionTable:
    P, cells = config.n_pieces, config.height * config.width
    acts = [gw.WAIT]
    acts += [gw.pick_up(p) for p in range(P)]
    acts += [gw.place(p, c) for p in range(P) for c in range(cells)]
    if config.variant == gw.COOK:
        acts += [gw.cut(p) for p in range(P)]
    return ActionTable(tuple(acts))


# ---------------------------------------------------------------------------
# features shared by the learned heads

def piece_features(state: gw.GridState) -> np.ndarray:
    """(P, F) per-piece description: where it is, whether it is cut, where it must go.

    Location: one-hot over all cells, row/column, the agents that can reach it
    and whose hand holds it.  Goal: the matching goal box (one-hot, row/column,
    owner) and whether that box needs a cut piece and is already filled.
    """
    lay = state.layout
    n, H, W = lay.n_agents, lay.height, lay.width
    N, nb = lay.n_cells, lay.n_board
    slot_of = {}
    for s in state.slots:
        for p, pc in enumerate(state.pieces):
            if s.matches(pc):
                slot_of.setdefault(p, s)
    rows = []
    for p, pc in enumerate(state.pieces):
        loc = state.location[p]
        f_loc = np.zeros(N)
        f_loc[loc] = 1.0
        reach = np.zeros(n)
        hand = np.zeros(n)
        if lay.is_hand(loc):
            hand[loc - nb] = 1.0
            rc = (-1.0, -1.0)
        else:
            for i in lay.reachers(loc):
                reach[i] = 1.0
            r, c = lay.rc(loc)
            rc = (r / (H - 1), c / (W - 1))
        slot = slot_of.get(p)
        f_slot = np.zeros(nb + 1)
        owner = np.zeros(n)
        extra = np.zeros(5)
        if slot is None:
            f_slot[nb] = 1.0
        else:
            f_slot[slot.cell] = 1.0
            owner[slot.owner] = 1.0
            sr, sc = lay.rc(slot.cell)
            extra[:] = [sr / (H - 1), sc / (W - 1), float(slot.needs_cut),
                        float(loc == slot.cell), float(gw.slot_filled(state, slot))]
        rows.append(np.concatenate([f_loc, [float(pc.cut)], rc, reach, hand, f_slot, owner, extra]))
    return np.stack(rows)


def proposer_features(state: gw.GridState, agent: int) -> np.ndarray:
    """(P, F') per-piece rows: own features, the querying agent, the mean over all pieces."""
    f = piece_features(state)
    own = np.zeros(state.n_agents)
    own[agent] = 1.0
    return np.concatenate([f, np.tile(own, (len(f), 1)), np.tile(f.mean(0), (len(f), 1))], axis=1)


def intent_features(history: Sequence[gw.GridState], k: int, agent: int, other: int) -> np.ndarray:
    """(P, F') per-piece rows over the last ``k`` states (oldest repeated as padding).

    Each row holds the piece's features in every state, the observer and the
    queried agent, and the mean over pieces of the latest state.
    """
    hist = list(history)[-k:]
    hist = [hist[0]] * (k - len(hist)) + hist
    fs = [piece_features(s) for s in hist]
    n = hist[-1].n_agents
    who = np.zeros(2 * n)
    who[agent] = 1.0
    who[n + other] = 1.0
    P = len(fs[-1])
    return np.concatenate(fs + [np.tile(who, (P, 1)), np.tile(fs[-1].mean(0), (P, 1))], axis=1)


# ---------------------------------------------------------------------------
# learned heads

@dataclass
class HeadConfig:
    hidden: tuple = (256, 256)
    lr: float = 1e-3
    batch: int = 128
    steps: int = 3000
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (256, 256)))
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _fit(net: tn.Network, loss_fn: Callable, n: int, cfg: HeadConfig, name: str,
         logger: Callable | None = None, epoch_steps: int = 100) -> list:
    rng = np.random.default_rng(cfg.seed)
    opt = tn.Adam(lr=cfg.lr)
    history, running, t0 = [], [], time.time()
    for it in range(cfg.steps):
        idx = rng.integers(n, size=min(cfg.batch, n))
        net.zero_grad()
        loss = loss_fn(idx)
        loss.backward()
        frac = it / max(cfg.steps - 1, 1)
        opt.lr = 0.1 * cfg.lr + 0.45 * cfg.lr * (1 + math.cos(math.pi * frac))
        opt.step(net.params, net.grads())
        running.append(float(loss.data))
        if (it + 1) % epoch_steps == 0 or it + 1 == cfg.steps:
            entry = {"epoch": len(history) + 1, "step": it + 1, "loss": float(np.mean(running)),
                     "seconds": round(time.time() - t0, 1)}
            history.append(entry)
            running = []
            if logger:
                logger(name, entry)
    return history


class _PieceScorer:
    """Shared per-piece network whose rows are reassembled into table order.

    Each piece row yields a wait vote, its pick, a place logit per board cell
    and (cook) its cut; the wait logit is the mean vote over pieces.  Sharing
    the network across pieces lets "place it where its goal is" be learned
    once rather than once per piece.
    """

    seed_offset = 0

    def __init__(self, table: ActionTable, net: tn.Network | None):
        self.table, self.net = table, net
        self.n_pieces = sum(a.verb == gw.Verb.PICK_UP for a in table.actions)
        self.n_cuts = sum(a.verb == gw.Verb.CUT for a in table.actions)
        self.n_board = (table.size - 1 - self.n_pieces - self.n_cuts) // max(self.n_pieces, 1)

    @classmethod
    def build(cls, table: ActionTable, feat_dim: int, cfg: HeadConfig):
        head = cls(table, None)
        out = 2 + head.n_board + (head.n_cuts > 0)
        head.net = tn.Network({"kind": "mlp", "in": feat_dim, "hidden": list(cfg.hidden),
                               "out": out, "act": "relu"}, seed=cfg.seed + cls.seed_offset)
        return head

    def forward(self, x) -> tn.Tensor:
        """(B, P, F') or (P, F') features to (B, table size) logits."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        b, n, nb = x.shape[0], self.n_pieces, self.n_board
        h = self.net.forward(x=x)
        parts = [tn.mean(tn.getitem(h, (slice(None), slice(None), slice(0, 1))), axis=1),
                 tn.getitem(h, (slice(None), slice(None), 1)),
                 tn.reshape(tn.getitem(h, (slice(None), slice(None), slice(2, 2 + nb))),
                            (b, n * nb))]
        if self.n_cuts:
            parts.append(tn.getitem(h, (slice(None), slice(None), 2 + nb)))
        return tn.concat(parts, axis=-1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            return self.forward(x).data


class ProposerHead(_PieceScorer):
    """Multi-hot action likelihoods for the querying agent, from :func:`proposer_features`."""

    def fit(self, X: np.ndarray, Y: np.ndarray, cfg: HeadConfig, logger=None) -> list:
        return _fit(self.net, lambda idx: tn.bce_with_logits(self.forward(X[idx]), Y[idx]),
                    len(X), cfg, "proposer", logger)


class IntentHead(_PieceScorer):
    """Distribution over the table for one other agent's next action, from :func:`intent_features`."""

    seed_offset = 1

    def fit(self, X: np.ndarray, labels: np.ndarray, cfg: HeadConfig, logger=None) -> list:
        return _fit(self.net, lambda idx: tn.cross_entropy(self.forward(X[idx]), labels[idx]),
                    len(X), cfg, "intent", logger)


class EvaluatorHead:
    """Steps-left regressor: a per-piece network summed over pieces."""

    def __init__(self, net: tn.Network):
        self.net = net

    @classmethod
    def build(cls, feat_dim: int, cfg: HeadConfig) -> "EvaluatorHead":
        return cls(tn.Network({"kind": "mlp", "in": feat_dim, "hidden": list(cfg.hidden),
                               "out": 1, "act": "relu", "pool": "sum"}, seed=cfg.seed + 2))

    def predict(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats)
        if feats.ndim == 2:
            feats = feats[None]
        with tn.no_grad():
            return self.net.forward(x=feats).data[:, 0]

    def fit(self, F: np.ndarray, y: np.ndarray, cfg: HeadConfig, logger=None) -> list:
        return _fit(self.net, lambda idx: tn.mse(self.net.forward(x=F[idx]), y[idx, None]),
                    len(F), cfg, "evaluator", logger)


@dataclass
class SubmoduleHeads:
    table: ActionTable
    proposer: ProposerHead | None = None
    intent: IntentHead | None = None
    evaluator: EvaluatorHead | None = None
    k: int = 3
    history: dict = field(default_factory=dict)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for name in ("proposer", "intent", "evaluator"):
            head = getattr(self, name)
            if head is not None:
                tn.save_file(head.net, path / f"{name}.ckpt")
        (path / "heads.json").write_text(json.dumps({"k": self.k, "history": self.history}, indent=1))

    @classmethod
    def load(cls, path, config: gw.EpisodeConfig) -> "SubmoduleHeads":
        path = Path(path)
        meta_file = path / "heads.json"
        if not meta_file.exists():
            raise FileNotFoundError(f"no sub-module checkpoints under {path}")
        meta = json.loads(meta_file.read_text())
        table = enumerate_action_space(config)
        heads = cls(table, k=meta["k"], history=meta["history"])
        if (path / "proposer.ckpt").exists():
            heads.proposer = ProposerHead(table, tn.load_file(path / "proposer.ckpt"))
        if (path / "intent.ckpt").exists():
            heads.intent = IntentHead(table, tn.load_file(path / "intent.ckpt"))
        if (path / "evaluator.ckpt").exists():
            heads.evaluator = EvaluatorHead(tn.load_file(path / "evaluator.ckpt"))
        return heads


# ---------------------------------------------------------------------------
# sub-module behaviour

def one_step_outcome(state: gw.GridState, agent: int, action: gw.Action) -> gw.GridState:
    joint = tuple(action if i == agent else gw.WAIT for i in range(state.n_agents))
    return gw.step(state, joint)


def capped_heuristic(state: gw.GridState) -> float:
    return min(gw.heuristic_steps_left(state), SCORE_CAP)


def oracle_proposals(state: gw.GridState, agent: int, P: int, table: ActionTable) -> list:
    """The ``P`` legal actions whose solo outcome has the lowest steps-left."""
    legal = sorted(gw.legal_actions(state, agent), key=table.index)
    scored = [(capped_heuristic(one_step_outcome(state, agent, a)), table.index(a), a) for a in legal]
    scored.sort(key=lambda r: (r[0], r[1]))
    out = [a for _, _, a in scored[:P]]
    return out + [gw.WAIT] * (P - len(out))


def learned_proposals(state: gw.GridState, agent: int, P: int, heads: SubmoduleHeads) -> list:
    """Top-``P`` legal actions by head probability, padded with wait."""
    logits = heads.proposer.logits(proposer_features(state, agent))[0]
    legal = gw.legal_actions(state, agent)
    order = np.argsort(-logits, kind="stable")
    out = []
    for i in order:
        a = heads.table.actions[i]
        if a in legal:
            out.append(a)
            if len(out) == P:
                break
    return out + [gw.WAIT] * (P - len(out))


def learned_intent(history: Sequence[gw.GridState], agent: int, other: int,
                   heads: SubmoduleHeads) -> gw.Action:
    logits = heads.intent.logits(intent_features(history, heads.k, agent, other))[0]
    a = heads.table.actions[int(np.argmax(logits))]
    return a if gw.is_legal(history[-1], other, a) else gw.WAIT


def learned_score(states: Sequence[gw.GridState], heads: SubmoduleHeads) -> np.ndarray:
    if not states:
        return np.zeros(0)
    feats = np.stack([piece_features(s) for s in states])
    return np.clip(heads.evaluator.predict(feats), 0.0, SCORE_CAP)


def guard(prev_score: float, new_score: float, valid: bool, tau: float) -> float:
    """Reject implausible one-step improvements and invalid states."""
    if not valid or (prev_score - new_score) > tau:
        return prev_score
    return new_score


# ---------------------------------------------------------------------------
# world models seen by the planner

class WorldModel(Protocol):
    def simulate(self, states: Sequence[gw.GridState], joints: Sequence[tuple],
                 rng: np.random.Generator) -> list: ...


class SimulatorWorld:
    """The exact environment dynamics; every prediction is valid."""

    def simulate(self, states, joints, rng):
        return [(gw.step(s, j), True) for s, j in zip(states, joints)]


class LearnedWorld:
    """Composed diffusion predictions from a trained world model."""

    def __init__(self, cwm, omega: float | None = None):
        self.cwm = cwm
        self.omega = omega

    def simulate(self, states, joints, rng):
        conds = [self.cwm.codec.factorize(j) for j in joints]
        preds = self.cwm.predict(list(states), conds, rng, self.omega)
        return [(p.state, p.valid) for p in preds]


# ---------------------------------------------------------------------------
# planning

@dataclass
class PlannerConfig:
    P: int = 3
    B: int = 3
    D: int = 3
    k: int = 3
    tau: float | None = None            # default n_agents + 1
    omega: float = 5.0
    proposer: str = "learned"           # learned | oracle
    intent: str = "learned"             # learned | oracle | wait
    evaluator: str = "learned"          # learned | oracle
    perception: str = "learned"         # learned | oracle
    seed: int = 0

    def __post_init__(self):
        if min(self.P, self.B, self.D, self.k) < 1:
            raise ValueError("P, B, D and k must all be at least 1")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")
        for name, allowed in (("proposer", ("learned", "oracle")),
                              ("intent", ("learned", "oracle", "wait")),
                              ("evaluator", ("learned", "oracle")),
                              ("perception", ("learned", "oracle"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} mode must be one of {allowed}")

    def threshold(self, n_agents: int) -> float:
        return float(n_agents + 1) if self.tau is None else float(self.tau)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Plan:
    states: list
    actions: list
    score: float
    order: int = 0
    valid: bool = True

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("a plan holds one more state than actions")


@dataclass
class Planner:
    """Sub-modules bound to one agent."""

    agent: int
    config: PlannerConfig
    world: WorldModel
    heads: SubmoduleHeads | None = None
    table: ActionTable | None = None
    intent_oracle: Callable | None = None     # (state, agent) -> Action
    calls: int = 0

    def __post_init__(self):
        if self.table is None and self.heads is not None:
            self.table = self.heads.table

    def _table(self, state: gw.GridState) -> ActionTable:
        if self.table is None:
            self.table = enumerate_action_space(state.config)
        return self.table

    def propose(self, state: gw.GridState) -> list:
        if self.config.proposer == "oracle" or self.heads is None or self.heads.proposer is None:
            if self.config.proposer == "learned" and (self.heads is None or self.heads.proposer is None):
                raise ValueError("learned proposer requested but no proposer head loaded")
            return oracle_proposals(state, self.agent, self.config.P, self._table(state))
        return learned_proposals(state, self.agent, self.config.P, self.heads)

    def infer_intents(self, history: Sequence[gw.GridState]) -> list:
        state = history[-1]
        out = []
        for j in range(state.n_agents):
            if j == self.agent:
                out.append(None)
            elif self.config.intent == "wait" or gw.is_success(state):
                out.append(gw.WAIT)
            elif self.config.intent == "oracle":
                if self.intent_oracle is None:
                    raise ValueError("oracle intents need an intent_oracle callable")
                a = self.intent_oracle(state, j)
                out.append(a if gw.is_legal(state, j, a) else gw.WAIT)
            else:
                if self.heads is None or self.heads.intent is None:
                    raise ValueError("learned intents requested but no intent head loaded")
                out.append(learned_intent(history, self.agent, j, self.heads))
        return out

    def evaluate(self, states: Sequence[gw.GridState]) -> np.ndarray:
        if self.config.evaluator == "oracle":
            return np.array([capped_heuristic(s) for s in states])
        if self.heads is None or self.heads.evaluator is None:
            raise ValueError("learned evaluator requested but no evaluator head loaded")
        return learned_score(states, self.heads)

    def plan(self, history: Sequence[gw.GridState], rng: np.random.Generator,
             trace: list | None = None) -> Plan:
        """Beam-tree search from ``history[-1]``; ``history`` feeds the intent tracker."""
        cfg = self.config
        root = history[-1]
        tau = cfg.threshold(root.n_agents)
        plans = [Plan([root], [], float(self.evaluate([root])[0]))]
        counter = 1
        for depth in range(cfg.D):
            plans = plans[: cfg.B]
            parents, joints, own = [], [], []
            for plan in plans:
                ctx = list(history[:-1]) + plan.states
                intents = self.infer_intents(ctx)
                for a in self.propose(plan.states[-1]):
                    joint = tuple(a if j == self.agent else intents[j] for j in range(root.n_agents))
                    parents.append(plan)
                    joints.append(gw.resolve_conflicts(joint))
                    own.append(a)
            outcomes = self.world.simulate([p.states[-1] for p in parents], joints, rng)
            self.calls += len(outcomes)
            raw = self.evaluate([s for s, _ in outcomes])
            new_plans = []
            for plan, a, joint, (s, valid), v in zip(parents, own, joints, outcomes, raw):
                accepted = guard(plan.score, float(v), valid, tau)
                fired = accepted != float(v) or not valid
                new_plans.append(Plan(plan.states + [s], plan.actions + [a], accepted, counter,
                                      plan.valid and valid))
                counter += 1
                if trace is not None:
                    trace.append({"depth": depth, "parent": plan.order, "order": counter - 1,
                                  "own": str(a), "joint": [str(x) for x in joint],
                                  "raw_score": float(v), "score": accepted, "valid": bool(valid),
                                  "guard": bool(fired)})
            new_plans.sort(key=lambda p: (p.score, p.order))
            plans = new_plans[: cfg.B]
        return plans[0]


# ---------------------------------------------------------------------------
# controller

class EpisodeFailed(RuntimeError):
    pass


@dataclass
class StepRecord:
    step: int
    action: str
    plan_score: float
    estimate_valid: bool
    guard_fires: int
    beams: list


class Controller:
    """One decentralized agent: fuse views, estimate, plan, act; nothing is shared."""

    def __init__(self, agent: int, template: gw.GridState, planner: Planner,
                 inpainter=None, seed: int = 0, keep_trace: bool = True):
        from . import perception
        self._perception = perception
        self.agent = agent
        self.template = template
        self.planner = planner
        self.inpainter = inpainter
        self.rng = np.random.default_rng(seed)
        self.observations: list = []
        self.estimates: list = []
        self.records: list = []
        self.keep_trace = keep_trace
        self.horizon = template.config.horizon

    @property
    def guard_fires(self) -> int:
        return sum(r.guard_fires for r in self.records)

    def estimate(self, obs: gw.PartialObservation, true_state: gw.GridState | None = None):
        self.observations.append(obs)
        oracle = true_state if self.planner.config.perception == "oracle" else None
        fused = self._perception.fuse(self.observations, self.template.layout.n_cells)
        est = self._perception.estimate(self.inpainter, fused, replace(self.template, turn=obs.step),
                                        self.rng, oracle=oracle)
        self.estimates.append(est.state)
        return est

    def act(self, obs: gw.PartialObservation, true_state: gw.GridState | None = None) -> gw.Action:
        if obs.step >= self.horizon:
            raise EpisodeFailed(f"horizon {self.horizon} exhausted")
        est = self.estimate(obs, true_state)
        state = est.state
        if gw.is_success(state):
            self.records.append(StepRecord(obs.step, str(gw.WAIT), 0.0, est.valid, 0, []))
            return gw.WAIT
        trace: list = []
        best = self.planner.plan(self.estimates[-self.planner.config.k:], self.rng, trace)
        action = best.actions[0] if best.actions else gw.WAIT
        if not gw.is_legal(state, self.agent, action):
            action = gw.WAIT
        fires = sum(1 for r in trace if r["guard"])
        self.records.append(StepRecord(obs.step, str(action), best.score, est.valid, fires,
                                       trace if self.keep_trace else []))
        log.debug("agent %d step %d -> %s (score %.2f, %d guard fires)",
                  self.agent, obs.step, action, best.score, fires)
        return action

    def trace_records(self) -> list:
        return [asdict(r) for r in self.records]
