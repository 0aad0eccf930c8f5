"""Lossless raster rendering of grid states and episodes."""
from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import gridworld as gw

CELL = 32
PAD = 4
REGION_TINTS = [(235, 242, 255), (255, 240, 230), (232, 250, 235), (250, 235, 250)]
SHARED_TINT = (225, 225, 225)
BOARD_TINT = (205, 170, 125)


def _hue(color: int, n: int) -> tuple:
    r, g, b = colorsys.hsv_to_rgb(color / max(n, 1), 0.75, 0.9)
    return int(r * 255), int(g * 255), int(b * 255)


def _glyph(draw: ImageDraw.ImageDraw, box: tuple, shape: int, fill, outline=(30, 30, 30), width=1):
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if shape == 0:
        draw.ellipse(box, fill=fill, outline=outline, width=width)
    elif shape == 1:
        draw.rectangle(box, fill=fill, outline=outline, width=width)
    elif shape == 2:
        draw.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=fill, outline=outline)
    else:
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=fill, outline=outline)


def _piece_style(state: gw.GridState, piece: gw.Piece) -> tuple:
    if state.config.variant == gw.GAME:
        return piece.shape, _hue(piece.color, gw.N_COLORS)
    return piece.shape % 4, _hue(piece.shape, gw.N_FOODS)


def render_state(state: gw.GridState) -> Image.Image:
    """Board with tinted agent regions, goal boxes, pieces and a hand column."""
    lay = state.layout
    H, W, n = lay.height, lay.width, lay.n_agents
    width = W * CELL + CELL + 3 * PAD
    height = max(H, n) * CELL + 2 * PAD
    img = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)

    def box(cell: int, inset: int = 0) -> tuple:
        if lay.is_hand(cell):
            i = cell - lay.n_board
            x0, y0 = PAD * 2 + W * CELL, PAD + i * CELL
        else:
            r, c = lay.rc(cell)
            x0, y0 = PAD + c * CELL, PAD + r * CELL
        return (x0 + inset, y0 + inset, x0 + CELL - 1 - inset, y0 + CELL - 1 - inset)

    for cell in range(lay.n_board):
        who = lay.reachers(cell)
        if cell == state.cutting_board:
            tint = BOARD_TINT
        elif len(who) > 1:
            tint = SHARED_TINT
        elif who:
            tint = REGION_TINTS[who[0] % len(REGION_TINTS)]
        else:
            tint = (255, 255, 255)
        draw.rectangle(box(cell), fill=tint, outline=(180, 180, 180))
    for i in range(n):
        draw.rectangle(box(lay.hand_cell(i)), fill=REGION_TINTS[i % len(REGION_TINTS)],
                       outline=(60, 60, 60), width=2)
    for slot in state.slots:
        shape, color = _piece_style(state, gw.Piece(-1, slot.shape, slot.color))
        draw.rectangle(box(slot.cell, 1), outline=color, width=3)
        _glyph(draw, box(slot.cell, 11), shape, None, outline=color)
    for p, cell in enumerate(state.location):
        pc = state.pieces[p]
        shape, color = _piece_style(state, pc)
        _glyph(draw, box(cell, 6), shape, color, width=3 if pc.cut else 1)
        if pc.cut:
            x0, y0, x1, y1 = box(cell, 8)
            draw.line((x0, y1, x1, y0), fill=(20, 20, 20), width=2)
    return img


def render_sequence(states: Sequence[gw.GridState], out_dir, prefix: str = "step") -> list:
    """One PNG per state (so ``k`` steps give ``k + 1`` files); returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, s in enumerate(states):
        p = out / f"{prefix}_{t:03d}.png"
        render_state(s).save(p, format="PNG")
        paths.append(p)
    return paths


def image_array(state: gw.GridState) -> np.ndarray:
    return np.asarray(render_state(state))
