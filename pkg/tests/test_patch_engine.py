import subprocess
import shutil

import pytest
from hypothesis import given, settings, strategies as st

from ccbudget.patch_engine import (
    AmbiguousMatch,
    BlockKind,
    NotFound,
    SourceTree,
    UpdateBlock,
    apply_patch,
    list_function_definitions,
    locate_function,
    parse_update_blocks,
    rejection_records,
    validate_syntax,
    variable_initializer,
)

FENCE = "```"


def block_text(header: str, name: str, body: str, lang: str = "") -> str:
    return f"{header} `{name}`:\n{FENCE}{lang}\n{body}\n{FENCE}\n"


def naive_function_span(text: str, name: str) -> tuple[int, int]:
    """Brace-counting scan for comment-free files with one definition per line start."""
    key = f"{name}("
    for line_start in [0] + [i + 1 for i, c in enumerate(text) if c == "\n"]:
        line = text[line_start:]
        if key in line.split("\n", 1)[0] and "{" in line:
            depth, i = 0, line_start + line.index("{")
            while True:
                if text[i] == "{":
                    depth += 1
                elif text[i] == "}":
                    depth -= 1
                    if depth == 0:
                        return line_start, i + 1
                i += 1
    raise LookupError(name)


class TestParse:
    def test_single_function(self):
        text = "Here you go.\n" + block_text("UPDATE FUNCTION", "F", "void F(void){}") + "Done."
        res = parse_update_blocks(text)
        assert res.ok
        assert res.blocks == [UpdateBlock(BlockKind.FUNCTION_REWRITE, "F", "void F(void){}")]

    def test_empty(self):
        res = parse_update_blocks("")
        assert res.blocks == [] and res.errors == []

    def test_prose_only(self):
        res = parse_update_blocks("I would raise the gain a little.\nNo code today.")
        assert res.blocks == [] and res.ok

    def test_three_kinds_in_order(self):
        text = (
            block_text("UPDATE FUNCTION", "Foo", "int Foo(void) { return 1; }", "c")
            + "between\n"
            + block_text("UPDATE VARIABLE", "kX", "const int kX = 3;")
            + block_text("ADD MEMBER TO", "S", "int y;")
        )
        res = parse_update_blocks(text)
        expected = [
            (BlockKind.FUNCTION_REWRITE, "Foo", "int Foo(void) { return 1; }"),
            (BlockKind.VARIABLE_REWRITE, "kX", "const int kX = 3;"),
            (BlockKind.STRUCT_MEMBER_ADD, "S", "int y;"),
        ]
        assert [(b.kind, b.target_name, b.body) for b in res.blocks] == expected

    def test_colon_optional_and_c_fence(self):
        text = f"UPDATE VARIABLE `kY`\n\n{FENCE}c\nint kY = 1;\n{FENCE}\n"
        res = parse_update_blocks(text)
        assert [b.target_name for b in res.blocks] == ["kY"]

    def test_unclosed_fence_keeps_prior_blocks(self):
        text = block_text("UPDATE VARIABLE", "kA", "int kA = 1;") + f"UPDATE FUNCTION `G`:\n{FENCE}\nvoid G(void) {{\n"
        res = parse_update_blocks(text)
        assert [b.target_name for b in res.blocks] == ["kA"]
        assert len(res.errors) == 1 and res.errors[0].index == 1

    def test_header_without_fence(self):
        res = parse_update_blocks("UPDATE FUNCTION `G`:\njust words\n" + block_text("UPDATE VARIABLE", "kB", "int kB;"))
        assert [e.index for e in res.errors] == [0]
        assert [b.target_name for b in res.blocks] == ["kB"]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from(["UPDATE FUNCTION ", "ADD MEMBER TO ", "`F`", ":", "\n", FENCE, "{", "}", "x;"]), max_size=60))
    def test_total(self, pieces):
        res = parse_update_blocks("".join(pieces))
        assert isinstance(res.blocks, list) and isinstance(res.errors, list)

    @settings(max_examples=100, deadline=None)
    @given(st.text(max_size=200))
    def test_total_on_arbitrary_text(self, text):
        parse_update_blocks(text)


class TestLocateFunction:
    def test_second_function(self):
        text = "int a(){return 0;}\nint b(){return 1;}"
        start, end = locate_function(text, "b")
        assert text[start:end] == "int b(){return 1;}"
        assert (start, end) == naive_function_span(text, "b")

    def test_absent(self):
        with pytest.raises(NotFound):
            locate_function("int a(){return 0;}", "zzz")

    def test_only_in_comment(self):
        with pytest.raises(NotFound):
            locate_function("/* int c() { return 2; } */\nint d(){return 1;}", "c")

    def test_only_in_string(self):
        with pytest.raises(NotFound):
            locate_function('const char *s = "int c(){}";\n', "c")

    def test_declaration_not_matched(self):
        text = "int e(int x);\nint f(void) { return e(1); }\nint e(int x)\n{\n    return x;\n}\n"
        start, end = locate_function(text, "e")
        assert text[start:end].startswith("int e(int x)\n{")

    def test_multiline_return_type(self):
        text = "#include <x.h>\nstatic\nuint32_t\nGetIt(\n    int a\n    )\n{\n    return 1;\n}\n"
        start, end = locate_function(text, "GetIt")
        assert text[start:end].startswith("static\nuint32_t\nGetIt(")

    def test_ambiguous(self):
        with pytest.raises(AmbiguousMatch):
            locate_function("int g(){return 0;}\nint g(){return 1;}", "g")

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=6), st.data())
    def test_matches_naive_scan(self, depths, data):
        funcs = []
        for i, depth in enumerate(depths):
            body = "{ " * depth + "x++; " + "} " * depth
            funcs.append(f"int f{i}(int x){{ {body}return x; }}")
        text = "\n".join(funcs) + "\n"
        target = data.draw(st.integers(0, len(depths) - 1))
        assert locate_function(text, f"f{target}") == naive_function_span(text, f"f{target}")

    def test_bundled_functions(self, source_tree):
        names = list_function_definitions(source_tree.files["bbr.c"])
        assert "BbrCongestionControlOnDataLost" in names
        assert "BbrCongestionControlUpdateCongestionWindow" in names


class TestApplyPatch:
    def test_identical_rewrite_is_noop(self, source_tree):
        text = source_tree.files["bbr.c"]
        start, end = locate_function(text, "BbrCongestionControlOnDataLost")
        block = UpdateBlock(BlockKind.FUNCTION_REWRITE, "BbrCongestionControlOnDataLost", text[start:end])
        out = apply_patch(source_tree, [block])
        assert out.tree.files == source_tree.files
        assert len(out.applied) == 1 and out.applied[0].file == "bbr.c"

    def test_member_add_appears_last(self, source_tree):
        block = UpdateBlock(BlockKind.STRUCT_MEMBER_ADD, "QUIC_CONGESTION_CONTROL_BBR", "uint64_t TotalLostBytes;")
        out = apply_patch(source_tree, [block])
        assert out.all_applied
        header = out.tree.files["bbr.h"]
        close = header.index("} QUIC_CONGESTION_CONTROL_BBR;")
        before = [ln.strip() for ln in header[:close].splitlines() if ln.strip()]
        assert before[-1] == "uint64_t TotalLostBytes;"
        assert validate_syntax(out.tree) == []

    def test_bad_block_does_not_block_others(self, source_tree):
        blocks = [
            UpdateBlock(BlockKind.VARIABLE_REWRITE, "kCwndGain", "const uint32_t kCwndGain = GAIN_UNIT * 3;"),
            UpdateBlock(BlockKind.FUNCTION_REWRITE, "Nope", "void Nope(void) { }"),
            UpdateBlock(BlockKind.STRUCT_MEMBER_ADD, "QUIC_CONGESTION_CONTROL_BBR", "uint64_t Extra;"),
        ]
        out = apply_patch(source_tree, blocks)
        assert [r.block for r in out.rejected] == [1]
        assert out.rejected[0].reason == "NotFound"
        assert sorted(a.block for a in out.applied) == [0, 2]
        assert variable_initializer(out.tree, "kCwndGain") == "GAIN_UNIT * 3"
        assert "uint64_t Extra;" in out.tree.files["bbr.h"]

    def test_applied_and_rejected_partition(self, source_tree):
        blocks = [
            UpdateBlock(BlockKind.FUNCTION_REWRITE, "bad name", "x"),
            UpdateBlock(BlockKind.VARIABLE_REWRITE, "kDrainGain", "   "),
            UpdateBlock(BlockKind.FUNCTION_REWRITE, "BbrCongestionControlOnDataLost", "void X( {"),
            UpdateBlock(BlockKind.VARIABLE_REWRITE, "kHighGain", "const uint32_t kHighGain = 700;"),
        ]
        out = apply_patch(source_tree, blocks)
        indices = sorted([a.block for a in out.applied] + [r.block for r in out.rejected])
        assert indices == [0, 1, 2, 3]
        assert [r.reason for r in out.rejected] == ["InvalidTargetName", "EmptyBody", "UnbalancedBody"]

    def test_empty_block_list(self, source_tree):
        out = apply_patch(source_tree, [])
        assert out.tree.files == source_tree.files and not out.applied and not out.rejected

    def test_later_blocks_see_earlier_edits(self):
        tree = SourceTree({"a.c": "int f(void)\n{\n    return 0;\n}\n"})
        blocks = [
            UpdateBlock(BlockKind.FUNCTION_REWRITE, "f", "int f(void)\n{\n    return 1;\n}"),
            UpdateBlock(BlockKind.FUNCTION_REWRITE, "f", "int f(void)\n{\n    return 2;\n}"),
        ]
        out = apply_patch(tree, blocks)
        assert "return 2;" in out.tree.files["a.c"] and "return 1;" not in out.tree.files["a.c"]

    def test_idempotent_rewrite(self, source_tree):
        body = (
            "void\nBbrCongestionControlOnDataLost(\n    QUIC_CONGESTION_CONTROL_BBR* Bbr,\n"
            "    const QUIC_LOSS_EVENT* LossEvent\n    )\n{\n    (void)Bbr;\n    (void)LossEvent;\n}"
        )
        block = UpdateBlock(BlockKind.FUNCTION_REWRITE, "BbrCongestionControlOnDataLost", body)
        once = apply_patch(source_tree, [block]).tree
        twice = apply_patch(once, [block]).tree
        assert once.files == twice.files
        assert validate_syntax(once) == []

    def test_variable_definition_preferred(self):
        tree = SourceTree({"a.h": "extern const int kZ;\n", "a.c": "const int kZ = 4;\nint use(void) { return kZ; }\n"})
        block = UpdateBlock(BlockKind.VARIABLE_REWRITE, "kZ", "const int kZ = 9;")
        out = apply_patch(tree, [block])
        assert out.tree.files["a.c"].startswith("const int kZ = 9;")
        assert out.tree.files["a.h"] == tree.files["a.h"]

    def test_a1_fixture(self, source_tree, fixtures_dir):
        parsed = parse_update_blocks((fixtures_dir / "a1_response.md").read_text())
        assert parsed.ok and len(parsed.blocks) == 5
        out = apply_patch(source_tree, parsed.blocks)
        assert out.all_applied
        assert validate_syntax(out.tree) == []
        assert "TotalLostBytes" in out.tree.files["bbr.h"]

    def test_truncated_fixture(self, source_tree, fixtures_dir):
        parsed = parse_update_blocks((fixtures_dir / "a1_truncated.md").read_text())
        out = apply_patch(source_tree, parsed.blocks)
        assert [(r.block, r.reason) for r in out.rejected] == [(3, "UnbalancedBody")]
        assert validate_syntax(out.tree) == []
        recs = rejection_records("cand-1", parsed, out)
        assert recs == [{"candidate": "cand-1", "block": 3, "reason": "UnbalancedBody", "detail": ""}]

    @pytest.mark.skipif(shutil.which("gcc") is None, reason="gcc not available")
    def test_a1_fixture_compiles(self, source_tree, fixtures_dir, tmp_path):
        parsed = parse_update_blocks((fixtures_dir / "a1_response.md").read_text())
        apply_patch(source_tree, parsed.blocks).tree.render(tmp_path)
        proc = subprocess.run(["gcc", "-fsyntax-only", "-Wall", "bbr.c"], cwd=tmp_path, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr


class TestValidateSyntax:
    def test_fixture_is_clean(self, source_tree):
        assert validate_syntax(source_tree) == []

    def test_deleted_brace(self, source_tree):
        text = source_tree.files["bbr.c"]
        start, end = locate_function(text, "BbrCongestionControlOnDataLost")
        broken = text[: end - 1] + text[end:]
        violations = validate_syntax(source_tree.replace("bbr.c", broken))
        assert len(violations) == 1 and violations[0].file == "bbr.c"

    def test_brace_in_string(self):
        tree = SourceTree({"s.c": 'const char *s = "}}{";\nchar c = \'}\';\n// }\n'})
        assert validate_syntax(tree) == []

    def test_unterminated_comment_and_string(self):
        v = validate_syntax(SourceTree({"a.c": "int x; /* never ends\n", "b.c": 'char *p = "open;\n'}))
        assert {x.file for x in v} == {"a.c", "b.c"}

    def test_reports_line(self):
        v = validate_syntax(SourceTree({"a.c": "int f(void)\n{\n    return (1;\n}\n"}))
        assert v and all(x.line >= 1 for x in v)
        assert any(x.line == 3 for x in v)


class TestSourceTree:
    def test_round_trip(self, tmp_path):
        files = {"x.c": "int a;\r\n/* é */\n", "sub/y.h": "#pragma once\n", "z.c": ""}
        SourceTree(files).render(tmp_path)
        back = SourceTree.load(tmp_path)
        assert back.files == files
        assert back.kind("sub/y.h") == "header" and back.kind("x.c") == "implementation"

    def test_bundled_round_trip(self, source_tree, tmp_path):
        source_tree.render(tmp_path)
        assert SourceTree.load(tmp_path).files == source_tree.files

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            SourceTree.load(tmp_path / "nope")
