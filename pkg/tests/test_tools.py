from __future__ import annotations

import io
import time
import zipfile

import pytest

from evoplan.core import Attachment, Task
from evoplan.gateway import ModelTurn, ScriptedBackend
from evoplan.tools import (
    CANONICAL_TOOLS,
    EXEC_CHAR_LIMIT,
    EXEC_KILL_GRACE_S,
    EXEC_TIMEOUT_S,
    FETCH_CHAR_LIMIT,
    SEARCH_RESULT_LIMIT,
    Toolbelt,
    ToolbeltError,
    ToolSpec,
    ToolStatus,
    visible_text,
)


def snippets(n):
    return [{"title": f"result {i}", "url": f"https://x.test/{i}", "snippet": f"s{i}"} for i in range(n)]


@pytest.fixture
def belt(tmp_path) -> Toolbelt:
    return Toolbelt(offline_dir=tmp_path / "fixtures")


class TestRegistry:
    def test_exactly_four_canonical_specs(self, belt):
        assert tuple(s.name for s in belt.specs()) == CANONICAL_TOOLS

    def test_parity_mode_rejects_fifth_tool(self, belt):
        spec = ToolSpec("magic", "d", {"type": "object", "required": ["x"], "properties": {}})
        with pytest.raises(ToolbeltError):
            belt.register(spec, lambda **kw: None)

    def test_explicit_config_allows_extension(self, tmp_path):
        belt = Toolbelt(offline_dir=tmp_path, parity=False)
        spec = ToolSpec("magic", "d", {"type": "object", "required": ["x"], "properties": {}})
        belt.register(spec, lambda **kw: None)
        assert "magic" in [s.name for s in belt.specs()]

    def test_schema_requires_a_required_field(self):
        with pytest.raises(ValueError):
            ToolSpec("t", "d", {"type": "object", "required": [], "properties": {}})


class TestSearch:
    def test_eight_results_truncate_to_five(self, belt):
        belt.save_fixture("web_search", {"query": "q8"}, {"results": snippets(8)})
        result = belt.search("q8")
        assert result.status is ToolStatus.OK
        assert result.truncated
        assert result.content.count("https://x.test/") == SEARCH_RESULT_LIMIT

    def test_fallback_results_noted(self, belt):
        belt.save_fixture("web_search", {"query": "qf"}, {"results": snippets(2), "fallback": True})
        result = belt.search("qf")
        assert not result.truncated
        assert "fallback provider" in result.content
        assert result.content.count("https://x.test/") == 2

    def test_empty_query_rejected(self, belt):
        assert belt.search("  ").status is ToolStatus.ERROR

    def test_both_providers_failing_is_error(self):
        def boom(query):
            raise RuntimeError("down")

        belt = Toolbelt(search_primary=boom, search_fallback=boom)
        assert belt.search("anything").status is ToolStatus.ERROR

    def test_primary_empty_falls_back(self):
        belt = Toolbelt(
            search_primary=lambda q: [],
            search_fallback=lambda q: [
                __import__("evoplan.tools", fromlist=["SearchSnippet"]).SearchSnippet("t", "https://y.test", "s")
            ],
        )
        result = belt.search("q")
        assert result.status is ToolStatus.OK
        assert "fallback provider" in result.content

    def test_missing_offline_fixture_is_error(self, belt):
        assert "offline fixture missing" in belt.search("never recorded").content


class TestFetch:
    def test_truncates_at_exactly_15000(self, belt):
        belt.save_fixture("web_fetch", {"url": "https://big.test/page"}, {"html": "x" * 16_000})
        result = belt.fetch("https://big.test/page")
        assert len(result.content) == FETCH_CHAR_LIMIT == 15_000
        assert result.truncated

    def test_small_page_untouched(self, belt):
        belt.save_fixture("web_fetch", {"url": "https://s.test/"}, {"html": "y" * 200})
        result = belt.fetch("https://s.test/")
        assert len(result.content) == 200
        assert not result.truncated

    def test_markup_stripped(self, belt):
        html = "<html><head><style>.x{}</style><script>bad()</script></head><nav>menu</nav><body><p>Hello <b>world</b></p></body></html>"
        belt.save_fixture("web_fetch", {"url": "https://m.test/"}, {"html": html})
        result = belt.fetch("https://m.test/")
        assert "Hello" in result.content and "world" in result.content
        assert "bad()" not in result.content and "menu" not in result.content

    def test_http_error_code_surfaces(self, belt):
        belt.save_fixture("web_fetch", {"url": "https://e.test/"}, {"status_code": 404, "html": ""})
        result = belt.fetch("https://e.test/")
        assert result.status is ToolStatus.ERROR
        assert "404" in result.content

    def test_timeout_fixture(self, belt):
        belt.save_fixture("web_fetch", {"url": "https://t.test/"}, {"timeout": True})
        assert belt.fetch("https://t.test/").status is ToolStatus.TIMEOUT

    def test_invalid_url_rejected(self, belt):
        assert belt.fetch("not a url").status is ToolStatus.ERROR

    def test_visible_text_handles_nesting(self):
        assert visible_text("<div><script>x</script>keep<span>me</span></div>") == "keep\nme"


def task_with(*attachments: Attachment) -> Task:
    return Task(id="t", goal_text="g", attachments=attachments)


def make_docx(paragraphs: list[str]) -> bytes:
    body = "".join(f"<w:p><w:r><w:t>{p}</w:t></w:r></w:p>" for p in paragraphs)
    doc = (
        '<?xml version="1.0"?><w:document xmlns:w="http://schemas.openxmlformats.org/wordprocessingml/2006/main">'
        f"<w:body>{body}</w:body></w:document>"
    )
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as archive:
        archive.writestr("word/document.xml", doc)
    return buffer.getvalue()


class TestReadAttachment:
    def test_csv_passthrough(self, belt):
        task = task_with(Attachment("data.csv", b"a,b\n1,2\n"))
        result = belt.read_attachment(task, "data.csv")
        assert result.status is ToolStatus.OK
        assert result.content == "a,b\n1,2\n"

    def test_unknown_filename_names_available(self, belt):
        task = task_with(Attachment("real.txt", b"x"))
        result = belt.read_attachment(task, "fake.txt")
        assert result.status is ToolStatus.ERROR
        assert "real.txt" in result.content

    def test_docx_extraction(self, belt):
        task = task_with(Attachment("doc.docx", make_docx(["first para", "second para"])))
        result = belt.read_attachment(task, "doc.docx")
        assert result.content == "first para\nsecond para"

    def test_zip_lists_then_extracts_members(self, belt):
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w") as archive:
            archive.writestr("inner.txt", "inner content")
        task = task_with(Attachment("arc.zip", buffer.getvalue()))
        listing = belt.read_attachment(task, "arc.zip")
        assert "inner.txt" in listing.content
        member = belt.read_attachment(task, "arc.zip", member="inner.txt")
        assert member.content == "inner content"

    def test_image_caption_from_scripted_vision_backend(self, tmp_path):
        vision = ScriptedBackend.from_turns([ModelTurn(text="a red square on white")])
        belt = Toolbelt(offline_dir=tmp_path, vision_model=vision)
        task = task_with(Attachment("img.png", b"\x89PNG fake"))
        result = belt.read_attachment(task, "img.png")
        assert result.content == "a red square on white"

    def test_image_without_vision_backend_errors(self, belt):
        task = task_with(Attachment("img.png", b"\x89PNG fake"))
        assert belt.read_attachment(task, "img.png").status is ToolStatus.ERROR

    def test_audio_transcription_backend(self, tmp_path):
        belt = Toolbelt(offline_dir=tmp_path, transcriber=lambda payload, name: "hello from audio")
        task = task_with(Attachment("clip.mp3", b"ID3 fake"))
        assert belt.read_attachment(task, "clip.mp3").content == "hello from audio"

    def test_unsupported_extension(self, belt):
        task = task_with(Attachment("x.exe", b"MZ"))
        result = belt.read_attachment(task, "x.exe")
        assert result.status is ToolStatus.ERROR
        assert "unsupported" in result.content

    def test_attachment_limit_applied(self, belt):
        task = task_with(Attachment("big.txt", b"z" * 20_000))
        result = belt.read_attachment(task, "big.txt")
        assert len(result.content) == FETCH_CHAR_LIMIT
        assert result.truncated


class TestExecCode:
    def test_simple_arithmetic(self, belt):
        result = belt.exec_code("print(2 + 2)")
        assert result.status is ToolStatus.OK
        assert result.content.strip() == "4"

    def test_output_truncated_at_exactly_10000(self, belt):
        result = belt.exec_code("print('x' * 12000)")
        assert len(result.content) == EXEC_CHAR_LIMIT == 10_000
        assert result.truncated

    def test_stderr_captured_on_failure(self, belt):
        result = belt.exec_code("raise ValueError('boom')")
        assert result.status is ToolStatus.ERROR
        assert "boom" in result.content

    def test_empty_code_rejected(self, belt):
        assert belt.exec_code(" ").status is ToolStatus.ERROR

    def test_infinite_loop_killed_with_partial_output(self, tmp_path):
        belt = Toolbelt(offline_dir=tmp_path, exec_timeout=1.0)
        started = time.monotonic()
        result = belt.exec_code("print('before', flush=True)\nwhile True: pass")
        elapsed = time.monotonic() - started
        assert result.status is ToolStatus.TIMEOUT
        assert elapsed < 1.0 + EXEC_KILL_GRACE_S + 2.0  # generous margin for CI
        assert "before" in result.content

    def test_default_wall_clock_limit_is_thirty_seconds(self):
        assert EXEC_TIMEOUT_S == 30.0
        assert Toolbelt().exec_timeout == 30.0

    def test_isolated_mode_blocks_parent_globals(self, belt):
        result = belt.exec_code("import os; print(os.environ.get('PYTHONPATH', 'clean'))")
        assert result.status is ToolStatus.OK


class TestInvoke:
    def test_dispatch_by_wire_name(self, belt):
        result = belt.invoke("python_exec", {"code": "print(1)"})
        assert result.content.strip() == "1"

    def test_unknown_tool(self, belt):
        assert belt.invoke("teleport", {}).status is ToolStatus.ERROR
