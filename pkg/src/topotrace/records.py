"""Record types and line-delimited JSON I/O."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

from topotrace.errors import ValidationError
from topotrace.trace import QTYPES, ExtractedAnswer, TopologyKind

Tokenizer = Callable[[str], int]


def whitespace_tokens(text: str) -> int:
    """Default token counter: whitespace-delimited pieces."""
    return len(text.split())


@dataclass(frozen=True)
class Question:
    id: str
    dataset: str
    subject: str
    qtype: str
    prompt: str
    ground_truth: str
    image_ref: str | None = None
    choices: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.qtype not in QTYPES:
            raise ValidationError(f"question {self.id!r}: unknown qtype {self.qtype!r}")
        if not str(self.ground_truth).strip():
            raise ValidationError(f"question {self.id!r}: empty ground truth")

    def text(self) -> str:
        """Prompt body shown to a model, choices included, no topology instructions."""
        if not self.choices:
            return self.prompt
        letters = "ABCDE"
        opts = "\n".join(f"({letters[i]}) {c}" for i, c in enumerate(self.choices))
        return f"{self.prompt}\nChoices:\n{opts}"

    def to_json(self) -> dict:
        obj = {
            "id": self.id,
            "dataset": self.dataset,
            "subject": self.subject,
            "qtype": self.qtype,
            "prompt": self.prompt,
        }
        if self.image_ref is not None:
            obj["image_ref"] = self.image_ref
        obj["ground_truth"] = self.ground_truth
        if self.choices is not None:
            obj["choices"] = list(self.choices)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> Question:
        try:
            choices = obj.get("choices")
            return cls(
                id=str(obj["id"]),
                dataset=obj.get("dataset", ""),
                subject=obj.get("subject", ""),
                qtype=obj["qtype"],
                prompt=obj["prompt"],
                ground_truth=str(obj["ground_truth"]),
                image_ref=obj.get("image_ref"),
                choices=tuple(choices) if choices is not None else None,
            )
        except KeyError as exc:
            raise ValidationError(f"question record missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class GenerationRecord:
    question_id: str
    declared_topology: TopologyKind
    sample_index: int
    model: str
    raw_text: str
    token_length: int
    classified_topology: TopologyKind | None = None
    answer: ExtractedAnswer | None = None
    outcome: int | None = None

    @property
    def record_id(self) -> str:
        # zero-padded so lexicographic order follows sample order
        return f"{self.question_id}/{self.model}/{self.declared_topology.value}/{self.sample_index:04d}"

    def to_json(self) -> dict:
        obj = {
            "question_id": self.question_id,
            "declared_topology": self.declared_topology.value,
            "classified_topology": self.classified_topology.value if self.classified_topology else None,
            "sample_index": self.sample_index,
            "model": self.model,
            "raw_text": self.raw_text,
            "answer": self.answer.to_json() if self.answer else None,
            "token_length": self.token_length,
        }
        if self.outcome is not None:
            obj["outcome"] = self.outcome
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> GenerationRecord:
        try:
            classified = obj.get("classified_topology")
            return cls(
                question_id=str(obj["question_id"]),
                declared_topology=TopologyKind.parse(obj["declared_topology"]),
                sample_index=int(obj["sample_index"]),
                model=obj.get("model", ""),
                raw_text=obj["raw_text"],
                token_length=int(obj["token_length"]),
                classified_topology=TopologyKind.parse(classified) if classified else None,
                answer=ExtractedAnswer.from_json(obj.get("answer")),
                outcome=obj.get("outcome"),
            )
        except KeyError as exc:
            raise ValidationError(f"response record missing field {exc.args[0]!r}") from None


class JsonlError(ValidationError):
    def __init__(self, path: str, line_no: int, reason: str = "invalid JSON"):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


def iter_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(str(path), i, exc.msg) from None


def dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: str | os.PathLike, objs: Iterable[dict]) -> int:
    """Write atomically (temp file + rename); returns the number of lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for obj in objs:
                fh.write(dumps(obj) + "\n")
                n += 1
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return n


def load_questions(path: str | os.PathLike) -> list[Question]:
    qs = [Question.from_json(o) for o in iter_jsonl(path)]
    seen: set[str] = set()
    for q in qs:
        if q.id in seen:
            raise ValidationError(f"{path}: duplicate question id {q.id!r}")
        seen.add(q.id)
    return qs


def load_responses(path: str | os.PathLike) -> list[GenerationRecord]:
    return [GenerationRecord.from_json(o) for o in iter_jsonl(path)]
