"""Victim evaluation: answer normalization, ASR, dataset and report I/O.

Datasets are UTF-8 JSON Lines ({"id", "image", "question", "answers"});
reports are JSON Lines of per-sample records followed by one summary object.
Adversarial images are stored twice: a lossless 8-bit PNG for inspection and
a raw float64 sidecar (.npy) that is the authoritative tensor, so 8-bit
quantization can never silently violate the pixel budget.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .core.errors import DatasetError
from .core.types import AnswerSet

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    words = text.lower().translate(_PUNCT_TABLE).split()
    return " ".join(w for w in words if w not in _ARTICLES)


def is_correct(prediction: str, answers: AnswerSet) -> bool:
    """True iff the normalized prediction equals any normalized answer."""
    pred = normalize_answer(prediction)
    return any(pred == normalize_answer(a) for a in answers)


@dataclass(frozen=True)
class Sample:
    """One dataset row; ``image_path`` is already resolved to a real file."""

    id: str
    image_path: str
    question: str
    answers: AnswerSet


@dataclass
class EvalRecord:
    """Per-sample outcome of replaying an adversarial pair against a victim."""

    id: str
    clean_prediction: str
    adv_prediction: str
    success: bool
    linf: float
    semantic_sim: float
    n_substitutions: int
    iterations: int


def make_record(
    sample_id: str,
    clean_prediction: str,
    adv_prediction: str,
    answers: AnswerSet,
    linf: float,
    semantic_sim: float,
    n_substitutions: int,
    iterations: int,
) -> EvalRecord:
    return EvalRecord(
        id=sample_id,
        clean_prediction=clean_prediction,
        adv_prediction=adv_prediction,
        success=not is_correct(adv_prediction, answers),
        linf=round(float(linf), 6),
        semantic_sim=round(float(semantic_sim), 6),
        n_substitutions=int(n_substitutions),
        iterations=int(iterations),
    )


def compute_asr(records: Iterable[EvalRecord]) -> float:
    """Attack success rate in percent over clean-correct samples."""
    records = list(records)
    if not records:
        raise DatasetError("cannot compute ASR over zero records")
    return 100.0 * sum(1 for r in records if r.success) / len(records)


# --- dataset I/O -----------------------------------------------------------


def load_dataset(path, warnings: Optional[list[str]] = None) -> list[Sample]:
    """Parse a JSONL dataset; malformed lines are fatal (with line number),
    samples whose image is missing or undecodable are skipped with a warning."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise DatasetError(f"{path}: dataset file is empty")
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise DatasetError(f"{path}:{lineno}: expected an object, got {type(obj).__name__}")
        missing = [k for k in ("id", "image", "question", "answers") if k not in obj]
        if missing:
            raise DatasetError(f"{path}:{lineno}: missing keys {missing}")
        if not isinstance(obj["answers"], list) or not all(isinstance(a, str) for a in obj["answers"]):
            raise DatasetError(f"{path}:{lineno}: answers must be a list of strings")
        if not obj["answers"]:
            raise DatasetError(f"{path}:{lineno}: answers must be non-empty")
        sample_id = str(obj["id"])
        if sample_id in seen_ids:
            raise DatasetError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
        seen_ids.add(sample_id)
        image_path = (path.parent / obj["image"]).resolve()
        if not image_path.is_file():
            if warnings is not None:
                warnings.append(f"{path}:{lineno}: image {obj['image']} not found; sample skipped")
            continue
        try:
            with Image.open(image_path) as img:
                img.verify()
        except Exception as exc:  # PIL raises a zoo of types here
            if warnings is not None:
                warnings.append(f"{path}:{lineno}: image {obj['image']} undecodable ({exc}); sample skipped")
            continue
        samples.append(
            Sample(
                id=sample_id,
                image_path=str(image_path),
                question=str(obj["question"]),
                answers=AnswerSet.of(obj["answers"]),
            )
        )
    return samples


def write_dataset(path, rows: Iterable[dict]) -> None:
    path = Path(path)
    lines = [json.dumps(row, sort_keys=True) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- report I/O ------------------------------------------------------------


def emit_report(records: list[EvalRecord], path, config_hash: str, n_skipped: int = 0) -> float:
    """Write per-sample records plus a trailing summary; returns the ASR."""
    asr = compute_asr(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(asdict(r), sort_keys=True) for r in records]
    summary = {
        "asr": round(asr, 6),
        "n": len(records),
        "config_hash": config_hash,
        "n_skipped": n_skipped,
    }
    lines.append(json.dumps(summary, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return asr


def load_report(path) -> tuple[list[EvalRecord], dict]:
    path = Path(path)
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    if not lines:
        raise DatasetError(f"{path}: report file is empty")
    try:
        objects = [json.loads(l) for l in lines]
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid report JSON ({exc})") from exc
    summary = objects[-1]
    if "asr" not in summary:
        raise DatasetError(f"{path}: last line is not a summary object")
    records = [EvalRecord(**obj) for obj in objects[:-1]]
    return records, summary


# --- image I/O --------------------------------------------------------------


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid and back to floats in [0, 1]."""
    return np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5).clip(0, 255) / 255.0


def save_image_png(path, image: np.ndarray) -> None:
    arr = np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_sidecar(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(image, dtype=np.float64))


def load_sidecar(path) -> np.ndarray:
    return np.load(path)


# --- synthetic data -----------------------------------------------------------

_QUESTION_TEMPLATES = (
    "what color is the {object}?",
    "what room is this?",
    "what animal is in the picture?",
    "what is the {person} holding?",
    "is the {object} {size}?",
    "what sport is the {person} playing?",
    "what is on the {object}?",
    "where is the {animal}?",
)


def generate_synthetic_dataset(
    out_dir,
    n_samples: int,
    victim,
    seed: int = 0,
    image_hw: tuple[int, int] = (16, 16),
) -> Path:
    """Write a clean-correct dataset: random images, templated questions, and
    the victim's own prediction as the single correct answer.

    Predictions are made on the quantized image exactly as it will be reloaded
    from the PNG, so every sample is correct by construction.
    """
    from .semantics import WORD_CLUSTERS

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    fills = {
        "object": WORD_CLUSTERS["object"],
        "person": WORD_CLUSTERS["person"],
        "animal": WORD_CLUSTERS["animal"],
        "size": WORD_CLUSTERS["size"],
    }
    rows = []
    h, w = image_hw
    for i in range(n_samples):
        template = _QUESTION_TEMPLATES[int(rng.integers(len(_QUESTION_TEMPLATES)))]
        question = re.sub(
            r"\{(\w+)\}",
            lambda m: fills[m.group(1)][int(rng.integers(len(fills[m.group(1)])))],
            template,
        )
        image = quantize(rng.uniform(0.0, 1.0, size=(h, w, 3)))
        rel = f"images/{i:04d}.png"
        save_image_png(out_dir / rel, image)
        answer = victim.predict(image, question)
        rows.append({"id": f"s{i:04d}", "image": rel, "question": question, "answers": [answer]})
    data_path = out_dir / "data.jsonl"
    write_dataset(data_path, rows)
    return data_path
