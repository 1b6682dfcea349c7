"""Tool registry, argument checking, and the mock tools used by fixtures.

The default catalog is a reconstruction: search/visit style web tools plus a
small calculator. Real web adapters exist behind the same executor contract
but are disabled unless explicitly enabled.
"""

from __future__ import annotations

import ast
import operator
import re
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Mapping, Optional

from .workspace import ToolCall, ToolCatalog, ToolParam, ToolSchema


class ToolError(Exception):
    """Tool-declared failure. ``kind`` is one of Transport, BadArguments, Empty."""

    def __init__(self, kind: str, message: str) -> None:
        if not message:
            raise ValueError("ToolError message must be non-empty")
        super().__init__(message)
        self.kind = kind
        self.message = message

    def render(self) -> str:
        return f"[tool error: {self.kind}] {self.message}"


class BadArguments(ToolError):
    def __init__(self, message: str) -> None:
        super().__init__("BadArguments", message)


class ToolNotFound(LookupError):
    pass


Executor = Callable[[dict[str, Any]], str]

_JSON_TYPES: dict[str, tuple[type, ...]] = {
    "string": (str,),
    "integer": (int,),
    "number": (int, float),
    "boolean": (bool,),
    "array": (list,),
    "object": (dict,),
}


@dataclass(frozen=True)
class Observation:
    text: str
    error: Optional[ToolError] = None

    @property
    def is_error(self) -> bool:
        return self.error is not None


class ToolRegistry:
    """Immutable mapping of tool name to (schema, executor)."""

    def __init__(self, entries: Mapping[str, tuple[ToolSchema, Executor]] | None = None) -> None:
        entries = dict(entries or {})
        for name, (schema, _) in entries.items():
            if schema.name != name:
                raise ValueError(f"registry key {name!r} does not match schema name {schema.name!r}")
        self._entries = MappingProxyType(entries)

    @property
    def entries(self) -> Mapping[str, tuple[ToolSchema, Executor]]:
        return self._entries

    def with_tool(self, schema: ToolSchema, executor: Executor) -> "ToolRegistry":
        merged = dict(self._entries)
        merged[schema.name] = (schema, executor)
        return ToolRegistry(merged)

    def catalog(self) -> ToolCatalog:
        return ToolCatalog(tuple(schema for schema, _ in self._entries.values()))

    def __contains__(self, name: object) -> bool:
        return name in self._entries


def check_arguments(schema: ToolSchema, args: Mapping[str, Any]) -> None:
    known = {p.name: p for p in schema.parameters}
    for p in schema.parameters:
        if p.required and p.name not in args:
            raise BadArguments(f"{schema.name}: missing required argument {p.name!r}")
    for key, value in args.items():
        if key not in known:
            raise BadArguments(f"{schema.name}: unknown argument {key!r}")
        expected = _JSON_TYPES.get(known[key].type)
        ok = expected is None or isinstance(value, expected)
        if known[key].type in ("integer", "number") and isinstance(value, bool):
            ok = False
        if not ok:
            raise BadArguments(f"{schema.name}: argument {key!r} must be of type {known[key].type}")


def execute(reg: ToolRegistry, call: ToolCall) -> Observation:
    """Validate and run one tool call.

    Raises ToolNotFound / BadArguments before execution; failures raised by
    the executor itself come back as an error observation.
    """
    if call.name not in reg.entries:
        raise ToolNotFound(f"unknown tool {call.name!r}")
    schema, executor = reg.entries[call.name]
    check_arguments(schema, call.arguments)
    try:
        text = executor(dict(call.arguments))
    except ToolError as err:
        return Observation(err.render(), err)
    except (OSError, ConnectionError, TimeoutError) as exc:
        err = ToolError("Transport", str(exc) or type(exc).__name__)
        return Observation(err.render(), err)
    if isinstance(text, bytes):
        text = text.decode("utf-8")  # raises on invalid UTF-8
    return Observation(text)


# ---------------------------------------------------------------- catalog

SEARCH = ToolSchema(
    "search",
    "Search the web. Returns a ranked list of result URLs with short snippets.",
    (ToolParam("query", "string", "The search query."),),
)
VISIT = ToolSchema(
    "visit",
    "Fetch a web page and return its text content.",
    (ToolParam("url", "string", "URL of the page to open."),),
)
CALCULATOR = ToolSchema(
    "calculator",
    "Evaluate an arithmetic expression with + - * / ** and parentheses.",
    (ToolParam("expression", "string", "The expression to evaluate."),),
)


def default_catalog() -> ToolCatalog:
    return ToolCatalog((SEARCH, VISIT, CALCULATOR))


_OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
    ast.USub: operator.neg,
    ast.UAdd: operator.pos,
}


MAX_EXPONENT = 1000


def _eval(node: ast.AST) -> float:
    if isinstance(node, ast.Expression):
        return _eval(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        left, right = _eval(node.left), _eval(node.right)
        if isinstance(node.op, ast.Pow) and abs(right) > MAX_EXPONENT:
            raise ToolError("BadArguments", f"exponent larger than {MAX_EXPONENT}")
        return _OPS[type(node.op)](left, right)
    if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_eval(node.operand))
    raise ToolError("BadArguments", "unsupported expression")


def calculator(args: dict[str, Any]) -> str:
    try:
        value = _eval(ast.parse(args["expression"], mode="eval"))
    except (SyntaxError, ZeroDivisionError, OverflowError) as exc:
        raise ToolError("BadArguments", f"cannot evaluate: {exc}") from None
    return str(value)


_WORD = re.compile(r"\w+", re.UNICODE)


class MockCorpus:
    """Directory-of-text-files web stand-in. URLs are ``mock://<file stem>``."""

    def __init__(self, root: str | Path | None = None, docs: Mapping[str, str] | None = None) -> None:
        pages: dict[str, str] = {}
        if root is not None:
            for path in sorted(Path(root).glob("*.txt")):
                pages[path.stem] = path.read_text(encoding="utf-8")
        pages.update(docs or {})
        self.pages = dict(sorted(pages.items()))

    def search(self, args: dict[str, Any]) -> str:
        terms = {w.lower() for w in _WORD.findall(args["query"])}
        scored = []
        for stem, text in self.pages.items():
            words = [w.lower() for w in _WORD.findall(text)]
            score = sum(1 for w in words if w in terms)
            if score:
                scored.append((-score, stem))
        if not scored:
            raise ToolError("Empty", f"no results for {args['query']!r}")
        lines = []
        for rank, (_, stem) in enumerate(sorted(scored)[:5], 1):
            first = self.pages[stem].strip().splitlines()[0] if self.pages[stem].strip() else ""
            lines.append(f"{rank}. mock://{stem} - {first[:160]}")
        return "\n".join(lines)

    def visit(self, args: dict[str, Any]) -> str:
        url = args["url"]
        stem = url[len("mock://"):] if url.startswith("mock://") else url
        if stem not in self.pages:
            raise ToolError("Transport", f"404 not found: {url}")
        return self.pages[stem]


def mock_registry(corpus: MockCorpus | None = None) -> ToolRegistry:
    corpus = corpus or MockCorpus()
    return ToolRegistry(
        {
            "search": (SEARCH, corpus.search),
            "visit": (VISIT, corpus.visit),
            "calculator": (CALCULATOR, calculator),
        }
    )


class HttpPageFetcher:
    """Real ``visit`` adapter. Disabled unless ``enabled=True``."""

    def __init__(self, enabled: bool = False, timeout: float = 20.0, max_chars: int = 200_000) -> None:
        self.enabled = enabled
        self.timeout = timeout
        self.max_chars = max_chars

    def __call__(self, args: dict[str, Any]) -> str:
        if not self.enabled:
            raise ToolError("Transport", "live page fetching is disabled in this configuration")
        import httpx

        try:
            resp = httpx.get(args["url"], timeout=self.timeout, follow_redirects=True)
        except httpx.HTTPError as exc:
            raise ToolError("Transport", f"fetch failed: {exc}") from None
        if resp.status_code >= 400:
            raise ToolError("Transport", f"HTTP {resp.status_code} for {args['url']}")
        return resp.text[: self.max_chars]


class DisabledSearch:
    """Placeholder for a real search API adapter."""

    def __call__(self, args: dict[str, Any]) -> str:
        raise ToolError("Transport", "live web search is not configured")


def web_registry(enable_fetch: bool = False) -> ToolRegistry:
    return ToolRegistry(
        {
            "search": (SEARCH, DisabledSearch()),
            "visit": (VISIT, HttpPageFetcher(enabled=enable_fetch)),
            "calculator": (CALCULATOR, calculator),
        }
    )
