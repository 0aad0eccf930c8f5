"""Tabletop puzzle/cooking gridworld for decentralized multi-agent cooperation.

Agents sit around a square table and can only reach their own region of the
board.  Adjacent seats share a single border cell through which pieces are
passed.  Every agent owns a goal box of slots; the episode is solved when each
slot holds the piece whose (shape, color) it requires.  The ``cook`` variant
adds a ``cut`` verb and a single cutting board that doubles as the only
passing cell between the two agents.

Cell indexing: board cells are ``r * width + c``; the hand of agent ``i`` is the
off-board cell ``height * width + i``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

GAME = "game"
COOK = "cook"

N_SHAPES = 4
N_COLORS = 4
N_FOODS = 10

UNREACHABLE = math.inf

GAME_KINDS = ("clockwise", "counterclockwise")
COOK_KINDS = ("selfish", "altruistic")


class ConfigError(ValueError):
    """Raised for episode configurations that cannot be instantiated."""


class IllegalActionError(ValueError):
    def __init__(self, agent: int, action: "Action"):
        super().__init__(f"illegal action for agent {agent}: {action}")
        self.agent = agent
        self.action = action


class Verb(IntEnum):
    WAIT = 0
    PICK_UP = 1
    PLACE = 2
    CUT = 3


@dataclass(frozen=True, order=True)
class Action:
    verb: Verb = Verb.WAIT
    piece: int | None = None
    target: int | None = None

    def __post_init__(self):
        v = Verb(self.verb)
        object.__setattr__(self, "verb", v)
        has_piece = self.piece is not None
        has_target = self.target is not None
        ok = {
            Verb.WAIT: not has_piece and not has_target,
            Verb.PICK_UP: has_piece and not has_target,
            Verb.PLACE: has_piece and has_target,
            Verb.CUT: has_piece and not has_target,
        }[v]
        if not ok:
            raise ValueError(f"malformed action operands: {self!r}")

    def __str__(self) -> str:
        if self.verb == Verb.WAIT:
            return "wait"
        if self.verb == Verb.PLACE:
            return f"place {self.piece} onto {self.target}"
        return f"{self.verb.name.lower()} {self.piece}"

    def to_list(self) -> list:
        return [int(self.verb), self.piece, self.target]

    @classmethod
    def from_list(cls, raw: Sequence) -> "Action":
        return cls(Verb(raw[0]), raw[1], raw[2])


WAIT = Action()

JointAction = tuple  # tuple[Action, ...], one per agent in index order


def pick_up(piece: int) -> Action:
    return Action(Verb.PICK_UP, piece)


def place(piece: int, target: int) -> Action:
    return Action(Verb.PLACE, piece, target)


def cut(piece: int) -> Action:
    return Action(Verb.CUT, piece)


@dataclass(frozen=True)
class Piece:
    id: int
    shape: int
    color: int
    cut: bool = False


@dataclass(frozen=True)
class Slot:
    cell: int
    owner: int
    shape: int
    color: int
    needs_cut: bool = False

    def matches(self, piece: Piece) -> bool:
        return piece.shape == self.shape and piece.color == self.color

    def accepts(self, piece: Piece) -> bool:
        return self.matches(piece) and (piece.cut or not self.needs_cut)


@dataclass(frozen=True)
class EpisodeConfig:
    variant: str = GAME
    n_agents: int = 4
    height: int = 8
    width: int = 8
    n_pieces: int = 8
    horizon: int = 30
    seed: int = 0
    slots_per_agent: int | None = None

    def __post_init__(self):
        if self.variant not in (GAME, COOK):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.n_agents < 2 or self.n_agents > 4:
            raise ConfigError("n_agents must be in 2..4")
        if self.variant == COOK and self.n_agents != 2:
            raise ConfigError("the cook variant is a two-agent task")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.height < 4 or self.width < 4 or self.height % 2 or self.width % 2:
            raise ConfigError("board sides must be even and >= 4")
        limit = N_SHAPES * N_COLORS if self.variant == GAME else N_FOODS
        if not 1 <= self.n_pieces <= limit:
            raise ConfigError(f"n_pieces must be in 1..{limit}")

    def with_seed(self, seed: int) -> "EpisodeConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Layout:
    """Static seating geometry: home areas, shared passing cells, regions."""

    height: int
    width: int
    n_agents: int
    homes: tuple[frozenset, ...]
    # (i, j) -> cell shared by agents i and j; j is the clockwise neighbour of i
    shared: tuple[tuple[tuple[int, int], int], ...]
    regions: tuple[frozenset, ...]

    @property
    def n_board(self) -> int:
        return self.height * self.width

    @property
    def n_cells(self) -> int:
        return self.n_board + self.n_agents

    def hand_cell(self, agent: int) -> int:
        return self.n_board + agent

    def is_hand(self, cell: int) -> bool:
        return cell >= self.n_board

    @cached_property
    def shared_map(self) -> dict:
        return dict(self.shared)

    @cached_property
    def shared_cells(self) -> frozenset:
        return frozenset(c for _, c in self.shared)

    def clockwise_cell(self, agent: int) -> int | None:
        return self.shared_map.get((agent, (agent + 1) % self.n_agents))

    def counterclockwise_cell(self, agent: int) -> int | None:
        return self.shared_map.get(((agent - 1) % self.n_agents, agent))

    def reachers(self, cell: int) -> tuple[int, ...]:
        if self.is_hand(cell):
            return (cell - self.n_board,)
        return tuple(i for i, reg in enumerate(self.regions) if cell in reg)

    def rc(self, cell: int) -> tuple[int, int]:
        return divmod(cell, self.width)


def make_layout(n_agents: int, height: int, width: int, shared_edges=None) -> Layout:
    """Seat ``n_agents`` around an ``height x width`` table.

    Two agents split the board into bottom/top halves, three agents use the
    bottom half plus the two top quadrants, four agents use quadrants.  Agent
    order is clockwise.  ``shared_edges`` optionally restricts which ring edges
    get a passing cell (used by the cook variant).
    """
    h2, w2 = height // 2, width // 2

    def rect(r0, r1, c0, c1):
        return frozenset(r * width + c for r in range(r0, r1) for c in range(c0, c1))

    bottom_left = rect(h2, height, 0, w2)
    top_left = rect(0, h2, 0, w2)
    top_right = rect(0, h2, w2, width)
    bottom_right = rect(h2, height, w2, width)
    # candidate passing cells per ring edge (cell lies in the home of the edge's first agent)
    left_seam = h2 * width + 0                  # bottom side of the left seam
    top_seam = 0 * width + (w2 - 1)             # left side of the top seam
    right_seam = (h2 - 1) * width + width - 1   # top side of the right seam
    bottom_seam = (height - 1) * width + w2     # right side of the bottom seam
    if n_agents == 2:
        homes = (bottom_left | bottom_right, top_left | top_right)
        edges = {(0, 1): left_seam, (1, 0): right_seam}
    elif n_agents == 3:
        homes = (bottom_left | bottom_right, top_left, top_right)
        edges = {(0, 1): left_seam, (1, 2): top_seam, (2, 0): right_seam}
    elif n_agents == 4:
        homes = (bottom_left, top_left, top_right, bottom_right)
        edges = {(0, 1): left_seam, (1, 2): top_seam, (2, 3): right_seam, (3, 0): bottom_seam}
    else:
        raise ConfigError("n_agents must be in 2..4")
    if shared_edges is not None:
        edges = {e: c for e, c in edges.items() if e in shared_edges}
    regions = []
    for i, home in enumerate(homes):
        extra = {c for (a, b), c in edges.items() if i in (a, b)}
        regions.append(frozenset(home | extra))
    return Layout(height, width, n_agents, tuple(homes),
                  tuple(sorted(edges.items())), tuple(regions))


@dataclass(frozen=True)
class GridState:
    """Immutable full world state.

    ``location[p]`` is the cell holding piece ``p`` (a board cell or a hand
    cell), which makes "every piece is in exactly one place" structural.
    """

    config: EpisodeConfig
    layout: Layout
    pieces: tuple[Piece, ...]
    location: tuple[int, ...]
    slots: tuple[Slot, ...]
    cutting_board: int | None = None
    turn: int = 0

    @property
    def n_agents(self) -> int:
        return self.layout.n_agents

    @property
    def n_pieces(self) -> int:
        return len(self.pieces)

    @cached_property
    def cells(self) -> tuple[int, ...]:
        """Per-cell content: piece id or -1, over board cells then hand cells."""
        out = [-1] * self.layout.n_cells
        for p, c in enumerate(self.location):
            out[c] = p
        return tuple(out)

    @cached_property
    def slot_at(self) -> dict:
        return {s.cell: s for s in self.slots}

    @property
    def fixtures(self) -> frozenset:
        cells = set(self.slot_at)
        if self.cutting_board is not None:
            cells.add(self.cutting_board)
        return frozenset(cells)

    def hand(self, agent: int) -> int | None:
        p = self.cells[self.layout.hand_cell(agent)]
        return None if p < 0 else p

    def content(self, cell: int) -> int | None:
        p = self.cells[cell]
        return None if p < 0 else p

    def move(self, piece: int, cell: int) -> "GridState":
        loc = list(self.location)
        loc[piece] = cell
        return replace(self, location=tuple(loc))

    def with_cut(self, piece: int, value: bool = True) -> "GridState":
        pcs = list(self.pieces)
        pcs[piece] = replace(pcs[piece], cut=value)
        return replace(self, pieces=tuple(pcs))

    def key(self) -> tuple:
        """Hashable dynamic part of the state (turn excluded)."""
        return self.location, tuple(p.cut for p in self.pieces)

    def same_dynamics(self, other: "GridState") -> bool:
        return self.key() == other.key()

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "pieces": [[p.id, p.shape, p.color, int(p.cut)] for p in self.pieces],
            "location": list(self.location),
            "slots": [[s.cell, s.owner, s.shape, s.color, int(s.needs_cut)] for s in self.slots],
            "cutting_board": self.cutting_board,
            "turn": self.turn,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridState":
        config = EpisodeConfig.from_dict(d["config"])
        board = d.get("cutting_board")
        layout = _layout_for(config, board)
        return cls(
            config=config,
            layout=layout,
            pieces=tuple(Piece(i, s, c, bool(k)) for i, s, c, k in d["pieces"]),
            location=tuple(d["location"]),
            slots=tuple(Slot(c, o, s, col, bool(k)) for c, o, s, col, k in d["slots"]),
            cutting_board=board,
            turn=d["turn"],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _layout_for(config: EpisodeConfig, cutting_board: int | None) -> Layout:
    if config.variant == COOK:
        full = make_layout(2, config.height, config.width)
        edge = next(e for e, c in full.shared if c == cutting_board)
        return make_layout(2, config.height, config.width, shared_edges={edge})
    return make_layout(config.n_agents, config.height, config.width)


def _slot_runs(home: frozenset, blocked: frozenset, width: int, k: int) -> list:
    runs = []
    for cell in sorted(home):
        r, c = divmod(cell, width)
        run = [r * width + c + j for j in range(k)]
        if c + k <= width and all(x in home and x not in blocked for x in run):
            runs.append(run)
    return runs


def new_game(config: EpisodeConfig) -> GridState:
    """Sample an initial state; fully determined by ``config`` (incl. seed)."""
    rng = np.random.default_rng(config.seed)
    n = config.n_agents
    if config.slots_per_agent is None:
        base, extra = divmod(config.n_pieces, n)
        per_agent = [base + (1 if i < extra else 0) for i in range(n)]
    else:
        per_agent = [config.slots_per_agent] * n
    if sum(per_agent) > config.n_pieces:
        raise ConfigError(
            f"{sum(per_agent)} goal slots requested but only {config.n_pieces} pieces exist")

    board = None
    if config.variant == COOK:
        full = make_layout(2, config.height, config.width)
        edge_idx = int(rng.integers(len(full.shared)))
        board = full.shared[edge_idx][1]
    layout = _layout_for(config, board)

    # goal boxes: a contiguous horizontal run on each agent's home side
    blocked = set(layout.shared_cells)
    slot_cells: list[list[int]] = []
    for i in range(n):
        if per_agent[i] == 0:
            slot_cells.append([])
            continue
        runs = _slot_runs(layout.homes[i], frozenset(blocked), config.width, per_agent[i])
        if not runs:
            raise ConfigError(f"no room for a {per_agent[i]}-slot goal box for agent {i}")
        run = runs[int(rng.integers(len(runs)))]
        slot_cells.append(run)
        blocked.update(run)

    if config.variant == GAME:
        combos = rng.permutation(N_SHAPES * N_COLORS)[: config.n_pieces]
        attrs = [(int(c) // N_COLORS, int(c) % N_COLORS) for c in combos]
    else:
        foods = rng.permutation(N_FOODS)[: config.n_pieces]
        attrs = [(int(f), 0) for f in foods]
    pieces = tuple(Piece(i, s, c) for i, (s, c) in enumerate(attrs))

    order = rng.permutation(config.n_pieces)
    slots = []
    k = 0
    for i in range(n):
        for cell in slot_cells[i]:
            p = pieces[int(order[k])]
            needs_cut = config.variant == COOK and bool(rng.random() < 0.5)
            slots.append(Slot(cell, i, p.shape, p.color, needs_cut))
            k += 1
    slots.sort(key=lambda s: s.cell)

    fixtures = set(blocked) - set(layout.shared_cells)
    if board is not None:
        fixtures.add(board)
    free = [c for c in range(layout.n_board) if c not in fixtures]
    if len(free) < config.n_pieces:
        raise ConfigError("board too small for the requested pieces")
    cells = rng.choice(len(free), size=config.n_pieces, replace=False)
    location = tuple(int(free[int(j)]) for j in cells)
    return GridState(config, layout, pieces, location, tuple(slots), board, 0)


# ---------------------------------------------------------------------------
# dynamics

def visible_cells(state: GridState, agent: int) -> frozenset:
    return state.layout.regions[agent] | {state.layout.hand_cell(agent)}


def _placeable(state: GridState, agent: int, piece: int, cell: int) -> bool:
    if state.cells[cell] >= 0:
        return False
    slot = state.slot_at.get(cell)
    if slot is None:
        return True
    return slot.owner == agent and slot.accepts(state.pieces[piece])


def legal_actions(state: GridState, agent: int) -> set:
    """All actions ``agent`` may take in ``state``; ``wait`` is always legal."""
    if not 0 <= agent < state.n_agents:
        raise IndexError(f"agent {agent} out of range")
    acts = {WAIT}
    layout = state.layout
    region = layout.regions[agent]
    held = state.hand(agent)
    if held is None:
        for p, c in enumerate(state.location):
            if c in region:
                acts.add(pick_up(p))
    else:
        for c in region:
            if _placeable(state, agent, held, c):
                acts.add(place(held, c))
    board = state.cutting_board
    if board is not None and board in region:
        p = state.cells[board]
        if p >= 0 and not state.pieces[p].cut:
            acts.add(cut(p))
    return acts


def is_legal(state: GridState, agent: int, action: Action) -> bool:
    v = action.verb
    if v == Verb.WAIT:
        return True
    region = state.layout.regions[agent]
    p = action.piece
    if p is None or not 0 <= p < state.n_pieces:
        return False
    loc = state.location[p]
    if v == Verb.PICK_UP:
        return state.hand(agent) is None and loc in region
    if v == Verb.PLACE:
        t = action.target
        return (state.hand(agent) == p and t is not None and t in region
                and _placeable(state, agent, p, t))
    if v == Verb.CUT:
        board = state.cutting_board
        return (board is not None and board in region and loc == board
                and not state.pieces[p].cut)
    return False


def resolve_conflicts(joint: Sequence[Action]) -> tuple:
    """Lowest agent index wins contested pieces/target cells; losers wait."""
    claimed_pieces: set = set()
    claimed_cells: set = set()
    out = []
    for a in joint:
        if a.verb == Verb.WAIT:
            out.append(a)
            continue
        contested = a.piece in claimed_pieces or (
            a.verb == Verb.PLACE and a.target in claimed_cells)
        if contested:
            out.append(WAIT)
            continue
        claimed_pieces.add(a.piece)
        if a.verb == Verb.PLACE:
            claimed_cells.add(a.target)
        out.append(a)
    return tuple(out)


def step(state: GridState, joint: Sequence[Action]) -> GridState:
    """Apply a joint action simultaneously and return the successor state."""
    if len(joint) != state.n_agents:
        raise ValueError(f"joint action has {len(joint)} components, expected {state.n_agents}")
    for i, a in enumerate(joint):
        if not is_legal(state, i, a):
            raise IllegalActionError(i, a)
    loc = list(state.location)
    pieces = list(state.pieces)
    for i, a in enumerate(resolve_conflicts(joint)):
        if a.verb == Verb.PICK_UP:
            loc[a.piece] = state.layout.hand_cell(i)
        elif a.verb == Verb.PLACE:
            loc[a.piece] = a.target
        elif a.verb == Verb.CUT:
            pieces[a.piece] = replace(pieces[a.piece], cut=True)
    return replace(state, location=tuple(loc), pieces=tuple(pieces), turn=state.turn + 1)


def slot_filled(state: GridState, slot: Slot) -> bool:
    p = state.cells[slot.cell]
    return p >= 0 and slot.accepts(state.pieces[p])


def is_success(state: GridState) -> bool:
    return all(slot_filled(state, s) for s in state.slots)


# ---------------------------------------------------------------------------
# steps-left heuristic

def piece_cost(state: GridState, piece: int, slot: Slot) -> float:
    """Fewest atomic agent-steps that bring ``piece`` into ``slot``.

    Breadth-first search over (cell, cut) situations.  From a hand, the only
    useful targets are passing cells, the cutting board and the slot itself.
    """
    layout = state.layout
    board = state.cutting_board
    start = (state.location[piece], state.pieces[piece].cut)
    if start[0] == slot.cell and (start[1] or not slot.needs_cut):
        return 0
    hubs = set(layout.shared_cells)
    if board is not None:
        hubs.add(board)
    seen = {start: 0}
    queue = deque([start])
    while queue:
        cell, is_cut = queue.popleft()
        d = seen[(cell, is_cut)]
        nxt = []
        if layout.is_hand(cell):
            holder = cell - layout.n_board
            region = layout.regions[holder]
            if holder == slot.owner and (is_cut or not slot.needs_cut):
                return d + 1
            nxt.extend((h, is_cut) for h in hubs if h in region)
        else:
            nxt.extend((layout.hand_cell(i), is_cut) for i in layout.reachers(cell))
            if cell == board and not is_cut:
                nxt.append((cell, True))
        for s in nxt:
            if s not in seen:
                seen[s] = d + 1
                queue.append(s)
    return UNREACHABLE


def heuristic_steps_left(state: GridState) -> float:
    """Sum over unfilled slots of the cheapest matching piece's route cost."""
    total = 0
    for slot in state.slots:
        if slot_filled(state, slot):
            continue
        best = UNREACHABLE
        for p in state.pieces:
            if slot.matches(p):
                best = min(best, piece_cost(state, p.id, slot))
        if best == UNREACHABLE:
            return UNREACHABLE
        total += best
    return total


# ---------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class PartialObservation:
    agent: int
    visible: frozenset
    contents: dict          # cell -> piece id or -1
    cut: frozenset          # ids of visible pieces that are cut
    step: int


def observe(state: GridState, agent: int) -> PartialObservation:
    vis = visible_cells(state, agent)
    contents = {c: state.cells[c] for c in sorted(vis)}
    cut_ids = frozenset(p for p in contents.values() if p >= 0 and state.pieces[p].cut)
    return PartialObservation(agent, vis, contents, cut_ids, state.turn)


# ---------------------------------------------------------------------------
# scripted cooperators

def _wanted_slot(state: GridState, agent: int, piece: int) -> Slot | None:
    pc = state.pieces[piece]
    for s in state.slots:
        if s.owner == agent and s.matches(pc) and not slot_filled(state, s):
            return s
    return None


def _settled(state: GridState, piece: int) -> bool:
    slot = state.slot_at.get(state.location[piece])
    return slot is not None and slot.accepts(state.pieces[piece])


def _region_pieces(state: GridState, agent: int) -> list:
    region = state.layout.regions[agent]
    return [p for p, c in enumerate(state.location) if c in region and not _settled(state, p)]


def _game_policy(state: GridState, agent: int, clockwise: bool) -> Action:
    layout = state.layout
    out_cell = layout.clockwise_cell(agent) if clockwise else layout.counterclockwise_cell(agent)
    held = state.hand(agent)
    if held is not None:
        slot = _wanted_slot(state, agent, held)
        if slot is not None:
            if state.cells[slot.cell] < 0 and slot.accepts(state.pieces[held]):
                return place(held, slot.cell)
            return WAIT
        if out_cell is not None and state.cells[out_cell] < 0:
            return place(held, out_cell)
        blocker = state.cells[out_cell] if out_cell is not None else -1
        if blocker >= 0 and _wanted_slot(state, agent, blocker) is not None:
            # the passing cell holds a piece for us: free the hand to take it
            drop = _drop_cell(state, agent)
            if drop is not None:
                return place(held, drop)
        return WAIT
    mine = [p for p in _region_pieces(state, agent) if _wanted_slot(state, agent, p)]
    if mine:
        return pick_up(min(mine))
    if out_cell is None:
        return WAIT
    unwanted = [p for p in _region_pieces(state, agent)
                if state.location[p] != out_cell and not _wanted_slot(state, agent, p)]
    if state.cells[out_cell] >= 0:
        # outgoing cell busy: only clear incoming passing cells, buffering in hand
        unwanted = [p for p in unwanted if state.location[p] in state.layout.shared_cells]
    if unwanted:
        return pick_up(min(unwanted))
    return WAIT


def _drop_cell(state: GridState, agent: int) -> int | None:
    layout = state.layout
    for c in sorted(layout.homes[agent]):
        if c in layout.shared_cells or c in state.slot_at or c == state.cutting_board:
            continue
        if state.cells[c] < 0:
            return c
    return None


def _cook_policy(state: GridState, agent: int, selfish: bool) -> Action:
    partner = 1 - agent
    board = state.cutting_board
    on_board = state.cells[board] if board is not None else -1

    def owner_slot(p):
        return _wanted_slot(state, agent, p) or _wanted_slot(state, partner, p)

    def is_mine(p):
        return _wanted_slot(state, agent, p) is not None

    def ready(p):
        slot = owner_slot(p)
        return slot is not None and (state.pieces[p].cut or not slot.needs_cut)

    held = state.hand(agent)
    if held is not None:
        if is_mine(held) and ready(held):
            return place(held, _wanted_slot(state, agent, held).cell)
        needs_board = owner_slot(held) is not None
        if needs_board and on_board < 0:
            return place(held, board)
        if on_board >= 0 and is_mine(on_board):
            drop = _drop_cell(state, agent)
            if drop is not None:
                return place(held, drop)
        return WAIT

    home = [p for p in _region_pieces(state, agent) if state.location[p] != board]
    own, other = [], []
    if on_board >= 0 and owner_slot(on_board) is not None:
        if not ready(on_board):
            (own if is_mine(on_board) else other).append(cut(on_board))
        elif is_mine(on_board):
            own.append(pick_up(on_board))
    for p in sorted(home):
        if is_mine(p) and ready(p):
            own.append(pick_up(p))
    if on_board < 0:
        for p in sorted(home):
            if is_mine(p) and not ready(p):
                own.append(pick_up(p))
            elif not is_mine(p) and owner_slot(p) is not None:
                other.append(pick_up(p))
    order = own + other if selfish else other + own
    return order[0] if order else WAIT


def cooperator_policy(kind: str, state: GridState, agent: int, rng=None) -> Action:
    """Scripted partner policies.

    ``clockwise`` / ``counterclockwise`` (game): finish own box first, pass
    unwanted pieces to the neighbouring shared cell in the given direction.
    ``selfish`` / ``altruistic`` (cook): order own-recipe work before or after
    helping the partner.  ``rng`` is accepted for interface symmetry; all
    kinds are deterministic.
    """
    variant = state.config.variant
    if kind in GAME_KINDS:
        if variant != GAME:
            raise ValueError(f"{kind} cooperator needs the game variant")
        return _game_policy(state, agent, kind == "clockwise")
    if kind in COOK_KINDS:
        if variant != COOK:
            raise ValueError(f"{kind} cooperator needs the cook variant")
        return _cook_policy(state, agent, kind == "selfish")
    raise ValueError(f"unknown cooperator kind {kind!r}")


def default_kinds(variant: str) -> tuple:
    return GAME_KINDS if variant == GAME else COOK_KINDS


def noisy_policy(kind: str, state: GridState, agent: int, rng: np.random.Generator,
                 epsilon: float = 0.1) -> Action:
    """Scripted policy with probability-``epsilon`` uniformly random legal actions."""
    if epsilon > 0 and rng.random() < epsilon:
        acts = sorted(legal_actions(state, agent))
        return acts[int(rng.integers(len(acts)))]
    return cooperator_policy(kind, state, agent, rng)


def rollout(state: GridState, policies: Sequence, horizon: int | None = None):
    """Play ``policies`` (callables ``state, agent -> Action``) until success or horizon.

    Returns the visited states and the executed joint actions.
    """
    horizon = state.config.horizon if horizon is None else horizon
    states = [state]
    actions = []
    while not is_success(state) and state.turn < horizon:
        joint = tuple(pol(state, i) for i, pol in enumerate(policies))
        actions.append(resolve_conflicts(joint))
        state = step(state, joint)
        states.append(state)
    return states, actions


def iter_all_actions(state: GridState) -> Iterable:
    for i in range(state.n_agents):
        yield i, sorted(legal_actions(state, i))
