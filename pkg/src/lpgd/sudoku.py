"""4x4 Sudoku boards: generation, one-hot encoding and rule checking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIZE = 4
BOX = 2
N_VARS = SIZE * SIZE * SIZE  # cell x digit one-hot
N_RULES = 3 * SIZE * SIZE  # rows, columns, boxes: each digit once


@dataclass(frozen=True, eq=False)
class SudokuInstance:
    """Flattened one-hot boards of shape ``(4 * 4 * 4,)``, ordered (row, col, digit)."""

    x_inc: np.ndarray
    x_true: np.ndarray
    mask: np.ndarray  # (4, 4) bool, True where the cell is given

    @property
    def board(self) -> np.ndarray:
        return decode(self.x_true)


def encode(board: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """One-hot encode a board of digits 0..3; cells outside ``mask`` become zero."""
    board = np.asarray(board, dtype=int)
    x = np.zeros((SIZE, SIZE, SIZE))
    r, c = np.indices((SIZE, SIZE))
    x[r, c, board] = 1.0
    if mask is not None:
        x[~np.asarray(mask, dtype=bool)] = 0.0
    return x.ravel()


def decode(x: np.ndarray) -> np.ndarray:
    """Argmax over the one-hot dimension (ties go to the smallest digit)."""
    return np.asarray(x, dtype=float).reshape(SIZE, SIZE, SIZE).argmax(axis=2)


def rule_violations(board: np.ndarray) -> np.ndarray:
    """Boolean vector of the 48 rules (row/col/box x digit) that are violated."""
    board = np.asarray(board, dtype=int)
    out = []
    for d in range(SIZE):
        hit = board == d
        out.extend(hit.sum(axis=1) != 1)
        out.extend(hit.sum(axis=0) != 1)
        boxes = hit.reshape(BOX, BOX, BOX, BOX).sum(axis=(1, 3))
        out.extend(boxes.ravel() != 1)
    return np.array(out, dtype=bool)


def is_valid_solution(board: np.ndarray) -> bool:
    return not rule_violations(board).any()


def constraint_matrix() -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth LP rules ``A x + b = 0`` for the one-hot encoding.

    Rows: one digit per cell, each digit once per row, column and box.
    """
    rows = []
    idx = np.arange(N_VARS).reshape(SIZE, SIZE, SIZE)
    for r in range(SIZE):
        for c in range(SIZE):
            rows.append(idx[r, c, :])
    for d in range(SIZE):
        for r in range(SIZE):
            rows.append(idx[r, :, d])
        for c in range(SIZE):
            rows.append(idx[:, c, d])
        for br in range(BOX):
            for bc in range(BOX):
                rows.append(idx[br * BOX : (br + 1) * BOX, bc * BOX : (bc + 1) * BOX, d].ravel())
    A = np.zeros((len(rows), N_VARS))
    for i, cols in enumerate(rows):
        A[i, cols] = 1.0
    return A, -np.ones(len(rows))


def _fill(board: np.ndarray, rng: np.random.Generator) -> bool:
    empty = np.argwhere(board < 0)
    if empty.size == 0:
        return True
    r, c = empty[0]
    br, bc = BOX * (r // BOX), BOX * (c // BOX)
    for d in rng.permutation(SIZE):
        if d in board[r] or d in board[:, c] or d in board[br : br + BOX, bc : bc + BOX]:
            continue
        board[r, c] = d
        if _fill(board, rng):
            return True
        board[r, c] = -1
    return False


def random_board(rng: np.random.Generator) -> np.ndarray:
    board = -np.ones((SIZE, SIZE), dtype=int)
    _fill(board, rng)
    return board


def generate_sudoku_dataset(count: int, givens: int, seed: int) -> list[SudokuInstance]:
    """``count`` solved boards from randomized backtracking, each with ``givens`` clues kept."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= givens <= SIZE * SIZE:
        raise ValueError(f"givens must be in [0, {SIZE * SIZE}]")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        board = random_board(rng)
        mask = np.zeros(SIZE * SIZE, dtype=bool)
        mask[rng.permutation(SIZE * SIZE)[:givens]] = True
        mask = mask.reshape(SIZE, SIZE)
        out.append(SudokuInstance(encode(board, mask), encode(board), mask))
    return out
