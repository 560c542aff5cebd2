"""The four-tool catalog: web search, page fetch, attachment reader, code exec.

Wire names and output limits are part of the engine contract and are used by
replay fixtures: search returns at most 5 snippets, fetched pages truncate at
15,000 characters, code execution output at 10,000 characters with a 30 s
wall-clock limit, and attachments reuse the fetch limit. Limits count code
points of the extracted text, applied after stripping.

Every network-touching tool supports an offline mode that serves canned
fixtures keyed by request digest, so the whole engine can run with zero
network access.
"""

from __future__ import annotations

import hashlib
import html.parser
import io
import json
import re
import subprocess
import sys
import tempfile
import time
import zipfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence
from xml.etree import ElementTree

from .core import EngineError, Task, canonical_json

SEARCH_RESULT_LIMIT = 5
FETCH_CHAR_LIMIT = 15_000
FETCH_TIMEOUT_S = 20.0
EXEC_CHAR_LIMIT = 10_000
EXEC_TIMEOUT_S = 30.0
EXEC_KILL_GRACE_S = 2.0
ATTACHMENT_CHAR_LIMIT = FETCH_CHAR_LIMIT  # no separate limit defined; reuse fetch

CANONICAL_TOOLS = ("web_search", "web_fetch", "read_file", "python_exec")


class ToolbeltError(EngineError):
    pass


class ToolStatus(str, Enum):
    OK = "ok"
    ERROR = "error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    input_schema: Mapping[str, Any]

    def __post_init__(self) -> None:
        required = self.input_schema.get("required") or []
        if not required:
            raise ValueError("tool schema must declare at least one required field")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "input_schema": dict(self.input_schema),
        }


@dataclass(frozen=True)
class ToolResult:
    status: ToolStatus
    content: str
    truncated: bool = False
    duration_ms: int = 0

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "content": self.content,
            "truncated": self.truncated,
            "duration_ms": self.duration_ms,
        }


@dataclass(frozen=True)
class SearchSnippet:
    title: str
    url: str
    snippet: str

    def render(self, rank: int) -> str:
        return f"{rank}. {self.title}\n   {self.url}\n   {self.snippet}"


def _truncate(text: str, limit: int) -> tuple[str, bool]:
    if len(text) > limit:
        return text[:limit], True
    return text, False


def request_digest(tool: str, arguments: Mapping[str, Any]) -> str:
    body = canonical_json({"tool": tool, "args": dict(arguments)})
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# HTML text extraction

_SKIPPED_TAGS = {"script", "style", "nav", "header", "footer", "noscript"}


class _TextExtractor(html.parser.HTMLParser):
    def __init__(self) -> None:
        super().__init__()
        self._chunks: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag: str, attrs) -> None:
        if tag in _SKIPPED_TAGS:
            self._skip_depth += 1

    def handle_endtag(self, tag: str) -> None:
        if tag in _SKIPPED_TAGS and self._skip_depth > 0:
            self._skip_depth -= 1

    def handle_data(self, data: str) -> None:
        if self._skip_depth == 0 and data.strip():
            self._chunks.append(data.strip())


def visible_text(markup: str) -> str:
    extractor = _TextExtractor()
    extractor.feed(markup)
    return "\n".join(extractor._chunks)


# ---------------------------------------------------------------------------
# search providers

SearchProvider = Callable[[str], Sequence[SearchSnippet]]


def _google_search(query: str) -> Sequence[SearchSnippet]:
    import httpx

    response = httpx.get(
        "https://www.google.com/search",
        params={"q": query, "num": 10},
        headers={"user-agent": "Mozilla/5.0"},
        timeout=FETCH_TIMEOUT_S,
    )
    response.raise_for_status()
    return _parse_result_page(response.text)


def _duckduckgo_lite_search(query: str) -> Sequence[SearchSnippet]:
    import httpx

    response = httpx.get(
        "https://lite.duckduckgo.com/lite/",
        params={"q": query},
        headers={"user-agent": "Mozilla/5.0"},
        timeout=FETCH_TIMEOUT_S,
    )
    response.raise_for_status()
    return _parse_result_page(response.text)


_LINK_RE = re.compile(r'<a[^>]+href="(https?://[^"]+)"[^>]*>(.*?)</a>', re.DOTALL)
_TAG_RE = re.compile(r"<[^>]+>")


def _parse_result_page(markup: str) -> list[SearchSnippet]:
    """Best-effort anchor scrape; provider pages change shape constantly."""
    snippets = []
    for url, inner in _LINK_RE.findall(markup):
        title = _TAG_RE.sub("", inner).strip()
        if not title or "google." in url or "duckduckgo." in url:
            continue
        snippets.append(SearchSnippet(title=title, url=url, snippet=title))
    return snippets


# ---------------------------------------------------------------------------
# attachment extraction


def _xml_texts(data: bytes, localname: str) -> list[str]:
    root = ElementTree.fromstring(data)
    return [el.text or "" for el in root.iter() if el.tag.rsplit("}", 1)[-1] == localname]


def _docx_text(payload: bytes) -> str:
    with zipfile.ZipFile(io.BytesIO(payload)) as archive:
        data = archive.read("word/document.xml")
    root = ElementTree.fromstring(data)
    paragraphs = []
    for para in root.iter():
        if para.tag.rsplit("}", 1)[-1] != "p":
            continue
        runs = [el.text or "" for el in para.iter() if el.tag.rsplit("}", 1)[-1] == "t"]
        if runs:
            paragraphs.append("".join(runs))
    return "\n".join(paragraphs)


def _xlsx_text(payload: bytes) -> str:
    with zipfile.ZipFile(io.BytesIO(payload)) as archive:
        shared: list[str] = []
        if "xl/sharedStrings.xml" in archive.namelist():
            shared = _xml_texts(archive.read("xl/sharedStrings.xml"), "t")
        rows: list[str] = []
        for name in sorted(archive.namelist()):
            if not re.fullmatch(r"xl/worksheets/sheet\d+\.xml", name):
                continue
            root = ElementTree.fromstring(archive.read(name))
            for row in root.iter():
                if row.tag.rsplit("}", 1)[-1] != "row":
                    continue
                cells = []
                for cell in row.iter():
                    if cell.tag.rsplit("}", 1)[-1] != "c":
                        continue
                    value = next(
                        (el.text or "" for el in cell.iter() if el.tag.rsplit("}", 1)[-1] == "v"),
                        "",
                    )
                    if cell.get("t") == "s" and value.isdigit() and int(value) < len(shared):
                        value = shared[int(value)]
                    cells.append(value)
                if any(cells):
                    rows.append("\t".join(cells))
        return "\n".join(rows)


def _pptx_text(payload: bytes) -> str:
    with zipfile.ZipFile(io.BytesIO(payload)) as archive:
        slides = sorted(n for n in archive.namelist() if re.fullmatch(r"ppt/slides/slide\d+\.xml", n))
        texts = []
        for name in slides:
            texts.extend(t for t in _xml_texts(archive.read(name), "t") if t.strip())
        return "\n".join(texts)


_PDF_TEXT_RE = re.compile(rb"\(((?:[^()\\]|\\.)*)\)\s*T[Jj]")


def _pdf_text(payload: bytes) -> str:
    """Minimal extractor for uncompressed text objects."""
    pieces = []
    for raw in _PDF_TEXT_RE.findall(payload):
        text = raw.replace(b"\\(", b"(").replace(b"\\)", b")").replace(b"\\\\", b"\\")
        pieces.append(text.decode("latin-1"))
    if not pieces:
        raise ToolbeltError("no extractable text objects in PDF")
    return " ".join(pieces)


_TEXT_EXTENSIONS = {".txt", ".md", ".csv", ".json", ".py", ".log", ".tsv", ".xml", ".html"}
_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}
_AUDIO_EXTENSIONS = {".mp3", ".wav"}


# ---------------------------------------------------------------------------
# the toolbelt


class Toolbelt:
    """Registry plus implementations of the canonical four tools.

    parity=True (the default) pins the registry to exactly the canonical
    catalog; registering anything else raises. Pass parity=False to allow
    extra tools via register().
    """

    def __init__(
        self,
        offline_dir: Optional[str | Path] = None,
        search_primary: SearchProvider = _google_search,
        search_fallback: SearchProvider = _duckduckgo_lite_search,
        vision_model=None,
        transcriber: Optional[Callable[[bytes, str], str]] = None,
        exec_timeout: float = EXEC_TIMEOUT_S,
        parity: bool = True,
    ) -> None:
        self.offline_dir = Path(offline_dir) if offline_dir else None
        self.search_primary = search_primary
        self.search_fallback = search_fallback
        self.vision_model = vision_model
        self.transcriber = transcriber
        self.exec_timeout = exec_timeout
        self.parity = parity
        self._extra: dict[str, tuple[ToolSpec, Callable[..., ToolResult]]] = {}

    def specs(self) -> list[ToolSpec]:
        base = [
            ToolSpec(
                "web_search",
                "Issue a web query and return the top result snippets.",
                {
                    "type": "object",
                    "properties": {"query": {"type": "string", "description": "search query"}},
                    "required": ["query"],
                },
            ),
            ToolSpec(
                "web_fetch",
                "Retrieve a URL and return its visible text.",
                {
                    "type": "object",
                    "properties": {"url": {"type": "string", "description": "absolute URL"}},
                    "required": ["url"],
                },
            ),
            ToolSpec(
                "read_file",
                "Read a task attachment in any supported format as text.",
                {
                    "type": "object",
                    "properties": {
                        "filename": {"type": "string", "description": "attachment filename"},
                        "member": {"type": "string", "description": "archive member to extract"},
                    },
                    "required": ["filename"],
                },
            ),
            ToolSpec(
                "python_exec",
                "Run Python code in an isolated subprocess and return its output.",
                {
                    "type": "object",
                    "properties": {"code": {"type": "string", "description": "Python source"}},
                    "required": ["code"],
                },
            ),
        ]
        return base + [spec for spec, _ in self._extra.values()]

    def register(self, spec: ToolSpec, handler: Callable[..., ToolResult]) -> None:
        if self.parity:
            raise ToolbeltError(
                f"registry is pinned to the canonical catalog {CANONICAL_TOOLS}; "
                "construct with parity=False to extend it"
            )
        if spec.name in CANONICAL_TOOLS or spec.name in self._extra:
            raise ToolbeltError(f"tool name already registered: {spec.name}")
        self._extra[spec.name] = (spec, handler)

    def invoke(self, name: str, arguments: Mapping[str, Any], task: Optional[Task] = None) -> ToolResult:
        if name == "web_search":
            return self.search(str(arguments.get("query", "")))
        if name == "web_fetch":
            return self.fetch(str(arguments.get("url", "")))
        if name == "read_file":
            if task is None:
                return ToolResult(ToolStatus.ERROR, "no task context for attachments")
            return self.read_attachment(task, str(arguments.get("filename", "")), arguments.get("member"))
        if name == "python_exec":
            return self.exec_code(str(arguments.get("code", "")))
        if name in self._extra:
            return self._extra[name][1](**arguments)
        return ToolResult(ToolStatus.ERROR, f"unknown tool: {name}")

    # -- fixtures -----------------------------------------------------------

    def _fixture(self, tool: str, arguments: Mapping[str, Any]) -> Optional[dict]:
        if self.offline_dir is None:
            return None
        path = self.offline_dir / tool / f"{request_digest(tool, arguments)}.json"
        if not path.exists():
            raise ToolbeltError(f"offline fixture missing: {path}")
        return json.loads(path.read_text(encoding="utf-8"))

    def save_fixture(self, tool: str, arguments: Mapping[str, Any], payload: dict) -> Path:
        assert self.offline_dir is not None
        path = self.offline_dir / tool / f"{request_digest(tool, arguments)}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(payload), encoding="utf-8")
        return path

    # -- web_search ---------------------------------------------------------

    def search(self, query: str) -> ToolResult:
        started = time.monotonic()
        if not query.strip():
            return ToolResult(ToolStatus.ERROR, "query must be nonempty")
        try:
            fixture = self._fixture("web_search", {"query": query})
        except ToolbeltError as exc:
            return ToolResult(ToolStatus.ERROR, str(exc))
        fallback_used = False
        if fixture is not None:
            results = [SearchSnippet(**r) for r in fixture.get("results", [])]
            fallback_used = fixture.get("fallback", False)
        else:
            results, fallback_used = self._live_search(query)
            if results is None:
                return ToolResult(
                    ToolStatus.ERROR,
                    "both search providers failed",
                    duration_ms=_elapsed_ms(started),
                )
        truncated = len(results) > SEARCH_RESULT_LIMIT
        kept = results[:SEARCH_RESULT_LIMIT]
        lines = [s.render(i + 1) for i, s in enumerate(kept)]
        if fallback_used:
            lines.append("(results from fallback provider)")
        content = "\n".join(lines) if kept else "no results"
        return ToolResult(ToolStatus.OK, content, truncated, _elapsed_ms(started))

    def _live_search(self, query: str) -> tuple[Optional[list[SearchSnippet]], bool]:
        try:
            results = list(self.search_primary(query))
        except Exception:
            results = []
        if results:
            return results, False
        try:
            return list(self.search_fallback(query)), True
        except Exception:
            return None, True

    # -- web_fetch ----------------------------------------------------------

    def fetch(self, url: str) -> ToolResult:
        started = time.monotonic()
        if not re.match(r"https?://\S+$", url):
            return ToolResult(ToolStatus.ERROR, f"not a valid URL: {url!r}")
        try:
            fixture = self._fixture("web_fetch", {"url": url})
        except ToolbeltError as exc:
            return ToolResult(ToolStatus.ERROR, str(exc))
        if fixture is not None:
            if fixture.get("timeout"):
                return ToolResult(ToolStatus.TIMEOUT, "fetch timed out", duration_ms=_elapsed_ms(started))
            status_code = fixture.get("status_code", 200)
            body = fixture.get("html", "")
        else:
            import httpx

            try:
                response = httpx.get(
                    url,
                    timeout=FETCH_TIMEOUT_S,
                    follow_redirects=True,
                    headers={"user-agent": "Mozilla/5.0"},
                )
            except httpx.TimeoutException:
                return ToolResult(ToolStatus.TIMEOUT, "fetch timed out", duration_ms=_elapsed_ms(started))
            except Exception as exc:
                return ToolResult(ToolStatus.ERROR, f"fetch failed: {exc}", duration_ms=_elapsed_ms(started))
            status_code = response.status_code
            body = response.text
        if not 200 <= status_code < 300:
            return ToolResult(
                ToolStatus.ERROR, f"HTTP {status_code}", duration_ms=_elapsed_ms(started)
            )
        text = visible_text(body) if "<" in body else body
        content, truncated = _truncate(text, FETCH_CHAR_LIMIT)
        return ToolResult(ToolStatus.OK, content, truncated, _elapsed_ms(started))

    # -- read_file ----------------------------------------------------------

    def read_attachment(
        self, task: Task, filename: str, member: Optional[str] = None
    ) -> ToolResult:
        started = time.monotonic()
        attachment = task.attachment(filename)
        if attachment is None:
            available = ", ".join(a.filename for a in task.attachments) or "(none)"
            return ToolResult(
                ToolStatus.ERROR,
                f"unknown attachment {filename!r}; available: {available}",
                duration_ms=_elapsed_ms(started),
            )
        try:
            text = self._extract(filename, attachment.payload, member)
        except ToolbeltError as exc:
            return ToolResult(ToolStatus.ERROR, str(exc), duration_ms=_elapsed_ms(started))
        except Exception as exc:
            return ToolResult(
                ToolStatus.ERROR, f"extraction failed for {filename}: {exc}", duration_ms=_elapsed_ms(started)
            )
        content, truncated = _truncate(text, ATTACHMENT_CHAR_LIMIT)
        return ToolResult(ToolStatus.OK, content, truncated, _elapsed_ms(started))

    def _extract(self, filename: str, payload: bytes, member: Optional[str]) -> str:
        suffix = Path(filename).suffix.lower()
        if suffix == ".zip":
            with zipfile.ZipFile(io.BytesIO(payload)) as archive:
                if member is None:
                    return "archive members:\n" + "\n".join(archive.namelist())
                if member not in archive.namelist():
                    raise ToolbeltError(f"member {member!r} not in archive {filename}")
                return self._extract(member, archive.read(member), None)
        if suffix in _TEXT_EXTENSIONS:
            return payload.decode("utf-8", errors="replace")
        if suffix == ".docx":
            return _docx_text(payload)
        if suffix == ".xlsx":
            return _xlsx_text(payload)
        if suffix == ".pptx":
            return _pptx_text(payload)
        if suffix == ".pdf":
            return _pdf_text(payload)
        if suffix in _IMAGE_EXTENSIONS:
            return self._caption_image(filename, payload)
        if suffix in _AUDIO_EXTENSIONS:
            if self.transcriber is None:
                raise ToolbeltError("no transcription backend configured")
            return self.transcriber(payload, filename)
        raise ToolbeltError(f"unsupported attachment extension: {suffix or '(none)'}")

    def _caption_image(self, filename: str, payload: bytes) -> str:
        if self.vision_model is None:
            raise ToolbeltError("no vision backend configured")
        import base64

        session = self.vision_model.start_session(
            "Describe the attached image factually in a short paragraph."
        )
        turn = session.send(
            [
                {
                    "role": "user",
                    "content": f"Caption the image {filename}.",
                    "image_b64": base64.b64encode(payload).decode("ascii"),
                }
            ]
        )
        return turn.text or ""

    # -- python_exec --------------------------------------------------------

    def exec_code(self, code: str) -> ToolResult:
        started = time.monotonic()
        if not code.strip():
            return ToolResult(ToolStatus.ERROR, "code must be nonempty")
        with tempfile.TemporaryDirectory(prefix="evoplan-exec-") as workdir:
            proc = subprocess.Popen(
                [sys.executable, "-I", "-c", code],
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=workdir,
                text=True,
            )
            timed_out = False
            try:
                out, err = proc.communicate(timeout=self.exec_timeout)
            except subprocess.TimeoutExpired:
                timed_out = True
                proc.kill()
                try:
                    out, err = proc.communicate(timeout=EXEC_KILL_GRACE_S)
                except subprocess.TimeoutExpired:
                    out, err = "", ""
        combined = (out or "") + (err or "")
        duration = _elapsed_ms(started)
        if timed_out:
            note = f"[killed after {self.exec_timeout:.0f}s wall-clock limit]"
            combined = (combined + "\n" + note).strip() if combined else note
            content, truncated = _truncate(combined, EXEC_CHAR_LIMIT)
            return ToolResult(ToolStatus.TIMEOUT, content, truncated, duration)
        content, truncated = _truncate(combined, EXEC_CHAR_LIMIT)
        if proc.returncode != 0:
            return ToolResult(ToolStatus.ERROR, content or f"exit code {proc.returncode}", truncated, duration)
        return ToolResult(ToolStatus.OK, content, truncated, duration)


def _elapsed_ms(started: float) -> int:
    return int((time.monotonic() - started) * 1000)
