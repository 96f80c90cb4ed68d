"""Response generation against an OpenAI-compatible chat-completions endpoint."""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import random
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from topotrace.errors import AuthMissing, EndpointError, ValidationError
from topotrace.genclient.cache import CacheKey, ResponseCache
from topotrace.genclient.templates import DEFAULT_TEMPLATES, PromptTemplate, render_prompt
from topotrace.records import GenerationRecord, Question, Tokenizer, dumps, whitespace_tokens, write_jsonl
from topotrace.trace import TOPOLOGIES, TopologyKind, extract_answer, summarize

log = logging.getLogger(__name__)

RETRY_STATUSES = frozenset({429}) | frozenset(range(500, 600))
FAILURE_EXIT_FRACTION = 0.10


@dataclass(frozen=True)
class GenConfig:
    base_url: str
    model_name: str
    cache_dir: str
    api_key_env_name: str = "OPENAI_API_KEY"
    temperature: float = 0.7
    n_samples_per_topology: int = 10
    max_tokens: int = 1024
    concurrency_limit: int = 4
    max_depth: int = 4
    n_children: int = 3
    n_neighbors: int = 2
    timeout: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_max: float = 30.0

    def __post_init__(self):
        if not 1 <= self.n_samples_per_topology <= 64:
            raise ValidationError(f"n_samples_per_topology must be in [1, 64], got {self.n_samples_per_topology}")
        if self.concurrency_limit < 1:
            raise ValidationError("concurrency_limit must be >= 1")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")
        for name in ("max_depth", "n_children", "n_neighbors"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.max_attempts < 1:
            raise ValidationError("max_attempts must be >= 1")


def image_part(image_ref: str) -> dict:
    """Content part for an image: URLs and data URLs pass through, local files go as base64."""
    if image_ref.startswith(("http://", "https://", "data:")):
        url = image_ref
    else:
        mime = mimetypes.guess_type(image_ref)[0] or "application/octet-stream"
        url = f"data:{mime};base64," + base64.b64encode(Path(image_ref).read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": url}}


def build_messages(prompt: str, image_ref: str | None) -> list[dict]:
    if image_ref is None:
        return [{"role": "user", "content": prompt}]
    return [{"role": "user", "content": [{"type": "text", "text": prompt}, image_part(image_ref)]}]


class ChatClient:
    """Thin synchronous client with retry on 429, 5xx and timeouts.

    Backoff before attempt ``k + 1`` is ``min(backoff_max, base * 2**(k-1))``
    scaled by a uniform jitter factor in [0.5, 1.0].
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        timeout: float = 60.0,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_max: float = 30.0,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        root = base_url.rstrip("/")
        if root.endswith("/v1"):
            root = root[: -len("/v1")]
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(base_url=root, timeout=timeout, headers=headers, transport=transport)
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self._sleep = sleep
        self._jitter = random.Random()

    def close(self) -> None:
        self._http.close()

    def backoff(self, attempt: int) -> float:
        delay = min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1))
        return delay * self._jitter.uniform(0.5, 1.0)

    def chat(self, body: dict) -> str:
        last: EndpointError | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._http.post("/v1/chat/completions", json=body)
            except httpx.TimeoutException as exc:
                last = EndpointError(None, f"timeout: {exc}")
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise EndpointError(200, f"malformed completion payload: {exc}") from None
                last = EndpointError(resp.status_code, resp.text[:200])
                if resp.status_code not in RETRY_STATUSES:
                    raise last
            if attempt < self.max_attempts:
                delay = self.backoff(attempt)
                log.debug("attempt %d failed (%s); retrying in %.2fs", attempt, last, delay)
                self._sleep(delay)
        assert last is not None
        raise last


@dataclass(frozen=True)
class Cell:
    question: Question
    topology: TopologyKind
    sample_index: int


@dataclass
class RunSummary:
    n_cells: int = 0
    n_failed: int = 0
    n_requested: int = 0
    n_from_cache: int = 0
    n_resumed: int = 0
    errors: list[dict] = field(default_factory=list)

    @property
    def failure_fraction(self) -> float:
        return self.n_failed / self.n_cells if self.n_cells else 0.0

    @property
    def partial_failure(self) -> bool:
        return self.failure_fraction > FAILURE_EXIT_FRACTION


class Generator:
    """Renders prompts, resolves samples from cache or the endpoint, and
    assembles response records in a fixed order."""

    def __init__(
        self,
        cfg: GenConfig,
        templates: Mapping[TopologyKind, PromptTemplate] = DEFAULT_TEMPLATES,
        tokenizer: Tokenizer = whitespace_tokens,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.cfg = cfg
        self.templates = templates
        self.tokenizer = tokenizer
        self.cache = ResponseCache(cfg.cache_dir)
        self._sleep = sleep
        self._transport = transport
        self._client: ChatClient | None = None

    def _get_client(self) -> ChatClient:
        if self._client is None:
            key = os.environ.get(self.cfg.api_key_env_name)
            if not key:
                raise AuthMissing(f"environment variable {self.cfg.api_key_env_name} is not set")
            self._client = ChatClient(
                self.cfg.base_url,
                key,
                timeout=self.cfg.timeout,
                max_attempts=self.cfg.max_attempts,
                backoff_base=self.cfg.backoff_base,
                backoff_max=self.cfg.backoff_max,
                sleep=self._sleep,
                transport=self._transport,
            )
        return self._client

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> Generator:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def key(self, cell: Cell) -> CacheKey:
        return CacheKey(cell.question.id, cell.topology, cell.sample_index, self.cfg.model_name, self.cfg.temperature)

    def prompt(self, question: Question, topology: TopologyKind) -> str:
        c = self.cfg
        return render_prompt(question, topology, c.max_depth, c.n_children, c.n_neighbors, self.templates)

    def request_body(self, cell: Cell) -> dict:
        return {
            "model": self.cfg.model_name,
            "messages": build_messages(self.prompt(cell.question, cell.topology), cell.question.image_ref),
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "n": 1,
            "seed": self.key(cell).request_seed(),
        }

    def fetch(self, cell: Cell) -> str:
        """Network fetch for one uncached cell; persists to cache before returning."""
        text = self._get_client().chat(self.request_body(cell))
        self.cache.put(self.key(cell), text)
        return text

    def _resolve(self, cells: Sequence[Cell], pool: ThreadPoolExecutor) -> list[str | Future]:
        pending = [c for c in cells if self.key(c) not in self.cache]
        if pending:
            self._get_client()  # fail fast on a missing key before anything is sent
        out: list[str | Future] = []
        for c in cells:
            cached = self.cache.get(self.key(c))
            out.append(cached if cached is not None else pool.submit(self.fetch, c))
        return out

    def generate(self, question: Question, topology: TopologyKind) -> list[str]:
        cells = [Cell(question, topology, i) for i in range(self.cfg.n_samples_per_topology)]
        with ThreadPoolExecutor(max_workers=self.cfg.concurrency_limit) as pool:
            resolved = self._resolve(cells, pool)
            return [r.result() if isinstance(r, Future) else r for r in resolved]

    def record(self, cell: Cell, raw: str) -> GenerationRecord:
        s = summarize(raw)
        return GenerationRecord(
            question_id=cell.question.id,
            declared_topology=cell.topology,
            sample_index=cell.sample_index,
            model=self.cfg.model_name,
            raw_text=raw,
            token_length=self.tokenizer(raw),
            classified_topology=s.classified,
            answer=extract_answer(raw, cell.question.qtype),
        )

    def cells(self, questions: Iterable[Question], topologies: Iterable[TopologyKind]) -> list[Cell]:
        tops = sorted(set(topologies))
        return [
            Cell(q, t, i) for q in questions for t in tops for i in range(self.cfg.n_samples_per_topology)
        ]

    def run(
        self,
        questions: Sequence[Question],
        topologies: Iterable[TopologyKind],
        out_path: str | os.PathLike,
        errors_path: str | os.PathLike | None = None,
        resume: bool = False,
    ) -> RunSummary:
        """Generate every (question, topology, sample) cell and write responses.

        Lines are written in (question file order, Chain < Tree < Graph,
        sample index) order as each cell resolves, so an interrupted run
        leaves a valid prefix. With ``resume`` the records already in
        ``out_path`` are kept and only missing cells are resolved.
        """
        topologies = list(topologies)
        if not topologies:
            raise ValidationError("no topologies selected")
        cells = self.cells(questions, topologies)
        out_path = Path(out_path)
        done = _read_existing(out_path) if resume else {}

        summary = RunSummary(n_cells=len(cells))
        todo = [c for c in cells if _cell_id(c, self.cfg.model_name) not in done]
        summary.n_resumed = len(cells) - len(todo)

        out_path.parent.mkdir(parents=True, exist_ok=True)
        with ThreadPoolExecutor(max_workers=self.cfg.concurrency_limit) as pool:
            resolved = {
                _cell_id(c, self.cfg.model_name): r for c, r in zip(todo, self._resolve(todo, pool))
            }
            summary.n_requested = sum(isinstance(r, Future) for r in resolved.values())
            summary.n_from_cache = len(todo) - summary.n_requested
            try:
                with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
                    for c in cells:
                        cid = _cell_id(c, self.cfg.model_name)
                        if cid in done:
                            fh.write(done[cid] + "\n")
                            continue
                        r = resolved[cid]
                        try:
                            raw = r.result() if isinstance(r, Future) else r
                        except Exception as exc:  # noqa: BLE001 - recorded per cell
                            summary.n_failed += 1
                            summary.errors.append(_error_entry(c, self.cfg.model_name, exc))
                            continue
                        fh.write(dumps(self.record(c, raw).to_json()) + "\n")
                        fh.flush()
            except BaseException:
                for r in resolved.values():
                    if isinstance(r, Future):
                        r.cancel()
                raise
        if errors_path is not None:
            write_jsonl(errors_path, summary.errors)
        return summary


def _cell_id(cell: Cell, model: str) -> tuple[str, str, str, int]:
    return cell.question.id, model, cell.topology.value, cell.sample_index


def _read_existing(path: Path) -> dict[tuple[str, str, str, int], str]:
    """Complete, parseable lines of an earlier (possibly interrupted) output file."""
    done: dict[tuple[str, str, str, int], str] = {}
    if not path.exists():
        return done
    for line in path.read_text(encoding="utf-8").split("\n"):
        if not line.strip():
            continue
        try:
            rec = GenerationRecord.from_json(json.loads(line))
        except Exception:  # noqa: BLE001 - a torn final line is expected after a kill
            continue
        done[(rec.question_id, rec.model, rec.declared_topology.value, rec.sample_index)] = line
    return done


def _error_entry(cell: Cell, model: str, exc: Exception) -> dict:
    return {
        "question_id": cell.question.id,
        "topology": cell.topology.value,
        "sample_index": cell.sample_index,
        "model": model,
        "status": getattr(exc, "status", None),
        "error": f"{type(exc).__name__}: {exc}",
    }


def parse_topologies(spec: str | Sequence[str] | None) -> list[TopologyKind]:
    if spec is None:
        return list(TOPOLOGIES)
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = sorted({TopologyKind.parse(s) for s in items if s.strip()})
    if not out:
        raise ValidationError("empty topology subset")
    return out
