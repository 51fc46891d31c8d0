"""Synthetic grid-image question answering.

Each instance is an 8x8 grid of patch classes: a background class fills the
grid and two or three object classes occupy 1-8 scattered cells each. Three prompt kinds:

* ``count``    -- how many cells have class c (fine-grained)
* ``at``       -- which class sits at (row, col) (fine-grained); rows and
  columns use separate token ranges so their roles survive attention pooling
* ``majority`` -- which class dominates the scene (coarse)

Prompts are four tokens ``[task, arg1, arg2, ASK]``; the answer is one token.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

N_CLASSES = 8
CLASS_BASE = 0
NUM_BASE = 8
MAX_NUMBER = 23
TASK_TOKENS = {"count": 32, "at": 33, "majority": 34}
ASK = 35
NONE = 36
ROW_BASE = 37
COL_BASE = 45
TASKS = ("count", "at", "majority")
FINE_TASKS = {"count", "at"}
PROMPT_LEN = 4


def class_token(c: int) -> int:
    return CLASS_BASE + c


def row_token(r: int) -> int:
    return ROW_BASE + r


def col_token(c: int) -> int:
    return COL_BASE + c


def number_token(n: int) -> int:
    if not 0 <= n <= MAX_NUMBER:
        raise ValueError(f"number {n} has no token")
    return NUM_BASE + n


@dataclass(frozen=True)
class SyntheticInstance:
    index: int
    grid: tuple[tuple[int, ...], ...]
    task: str
    prompt: tuple[int, ...]
    answer: tuple[int, ...]

    @property
    def difficulty(self) -> str:
        return "fine" if self.task in FINE_TASKS else "coarse"

    def to_json(self) -> str:
        doc = asdict(self)
        doc["difficulty"] = self.difficulty
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "SyntheticInstance":
        doc = json.loads(line)
        doc.pop("difficulty", None)
        return cls(doc["index"], tuple(tuple(r) for r in doc["grid"]), doc["task"],
                   tuple(doc["prompt"]), tuple(doc["answer"]))


@dataclass(frozen=True)
class DataConfig:
    rows: int = 8
    cols: int = 8
    min_object_classes: int = 2
    max_object_classes: int = 3
    max_cells_per_class: int = 8


def _make_instance(seed: int, index: int, cfg: DataConfig) -> SyntheticInstance:
    rng = np.random.default_rng([seed, index])
    background = int(rng.integers(N_CLASSES))
    grid = np.full((cfg.rows, cfg.cols), background, dtype=int)
    others = [c for c in range(N_CLASSES) if c != background]
    k = int(rng.integers(cfg.min_object_classes, cfg.max_object_classes + 1))
    obj_classes = [int(c) for c in rng.choice(others, size=k, replace=False)]
    sizes = [int(rng.integers(1, cfg.max_cells_per_class + 1)) for _ in obj_classes]
    cells = rng.choice(cfg.rows * cfg.cols, size=sum(sizes), replace=False)
    counts = {c: 0 for c in range(N_CLASSES)}
    counts[background] = cfg.rows * cfg.cols - len(cells)
    pos = 0
    for c, size in zip(obj_classes, sizes):
        for cell in cells[pos:pos + size]:
            grid[cell // cfg.cols, cell % cfg.cols] = c
        counts[c] = size
        pos += size

    task = TASKS[index % len(TASKS)]
    if task == "count":
        absent = [c for c in others if c not in obj_classes]
        target = int(rng.choice(obj_classes)) if rng.random() < 0.8 else int(rng.choice(absent))
        prompt = (TASK_TOKENS[task], class_token(target), NONE, ASK)
        answer = number_token(counts[target])
    elif task == "at":
        cell = int(rng.choice(cells)) if rng.random() < 0.75 else int(rng.integers(cfg.rows * cfg.cols))
        r, c = divmod(cell, cfg.cols)
        prompt = (TASK_TOKENS[task], row_token(r), col_token(c), ASK)
        answer = class_token(int(grid[r, c]))
    else:
        prompt = (TASK_TOKENS[task], NONE, NONE, ASK)
        answer = class_token(max(counts, key=lambda k: (counts[k], -k)))
    return SyntheticInstance(index, tuple(tuple(int(v) for v in row) for row in grid),
                             task, prompt, (answer,))


def answer_oracle(grid, prompt) -> tuple[int, ...]:
    """Recompute the answer by scanning the grid; independent of the generator."""
    flat = [v for row in grid for v in row]
    kind = {v: k for k, v in TASK_TOKENS.items()}[prompt[0]]
    if kind == "count":
        target = prompt[1] - CLASS_BASE
        return (NUM_BASE + sum(1 for v in flat if v == target),)
    if kind == "at":
        r, c = prompt[1] - ROW_BASE, prompt[2] - COL_BASE
        return (CLASS_BASE + grid[r][c],)
    tally = [flat.count(k) for k in range(N_CLASSES)]
    best = max(tally)
    return (CLASS_BASE + tally.index(best),)


def gen_dataset(seed: int, count: int, cfg: DataConfig | None = None, start: int = 0) -> list[SyntheticInstance]:
    if count < 1:
        raise ValueError("dataset count must be at least 1")
    cfg = cfg or DataConfig()
    out = []
    for i in range(start, start + count):
        inst = _make_instance(seed, i, cfg)
        if answer_oracle(inst.grid, inst.prompt) != inst.answer:
            raise AssertionError(f"instance {i}: generator and oracle disagree")
        out.append(inst)
    return out


def dumps(dataset) -> str:
    return "".join(inst.to_json() + "\n" for inst in dataset)


def save_dataset(path, dataset) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(dataset))


def load_dataset(path) -> list[SyntheticInstance]:
    with open(path) as fh:
        return [SyntheticInstance.from_json(line) for line in fh if line.strip()]


@dataclass
class Batch:
    patch_ids: torch.Tensor  # [B, L_v]
    text_ids: torch.Tensor  # [B, L_t]
    answers: torch.Tensor  # [B]
    tasks: list[str]

    def __len__(self):
        return self.answers.shape[0]

    def select(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(self.patch_ids[idx], self.text_ids[idx], self.answers[idx],
                     [self.tasks[i] for i in idx.tolist()])


def to_batch(dataset) -> Batch:
    return Batch(
        patch_ids=torch.tensor([[v for row in inst.grid for v in row] for inst in dataset]),
        text_ids=torch.tensor([list(inst.prompt) for inst in dataset]),
        answers=torch.tensor([inst.answer[0] for inst in dataset]),
        tasks=[inst.task for inst in dataset],
    )
