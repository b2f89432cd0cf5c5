"""Instruction file discovery, include expansion, and prompt assembly."""

from __future__ import annotations

import os
import re
import subprocess

import pytest
from hypothesis import given, settings, strategies as st

from harnesskit.context import (
    ContextAssembler,
    MemoryLevel,
    discover_memory_files,
    process_memory_file,
)


def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


class TestIncludeExpansion:
    def test_single_include_appends_after_including_text(self, tmp_path):
        write(tmp_path / "b.md", "from b")
        write(tmp_path / "a.md", "from a\n@b.md")
        assert process_memory_file(tmp_path / "a.md") == "from a\n@b.md\nfrom b"

    def test_depth_first_each_file_once(self, tmp_path):
        write(tmp_path / "c.md", "C")
        write(tmp_path / "b.md", "B\n@c.md")
        write(tmp_path / "a.md", "A\n@b.md @c.md")
        out = process_memory_file(tmp_path / "a.md")
        # c.md expands under b.md; the second directive finds it already seen
        assert out == "A\n@b.md @c.md\nB\n@c.md\nC"

    def test_cycle_terminates(self, tmp_path):
        write(tmp_path / "a.md", "A\n@b.md")
        write(tmp_path / "b.md", "B\n@a.md")
        out = process_memory_file(tmp_path / "a.md")
        assert out == "A\n@b.md\nB\n@a.md"

    def test_self_include_terminates(self, tmp_path):
        write(tmp_path / "a.md", "A\n@a.md")
        assert process_memory_file(tmp_path / "a.md") == "A\n@a.md"

    def test_missing_target_dropped(self, tmp_path):
        write(tmp_path / "a.md", "A\n@ghost.md")
        assert process_memory_file(tmp_path / "a.md") == "A\n@ghost.md"

    def test_directive_in_code_fence_inert(self, tmp_path):
        write(tmp_path / "b.md", "B")
        write(tmp_path / "a.md", "A\n```\n@b.md\n```")
        assert "B" not in process_memory_file(tmp_path / "a.md").split("```")[-1]
        assert not process_memory_file(tmp_path / "a.md").endswith("B")

    def test_directive_after_fence_close_active(self, tmp_path):
        write(tmp_path / "b.md", "B")
        write(tmp_path / "c.md", "C")
        write(tmp_path / "a.md", "```\n@b.md\n```\n@c.md")
        out = process_memory_file(tmp_path / "a.md")
        assert out.endswith("C")
        assert "\nB" not in out

    def test_tilde_fence_also_counts(self, tmp_path):
        write(tmp_path / "b.md", "B")
        write(tmp_path / "a.md", "~~~\n@b.md\n~~~")
        assert not process_memory_file(tmp_path / "a.md").endswith("B")

    def test_email_address_not_a_directive(self, tmp_path):
        write(tmp_path / "a.md", "contact user@example.md about it")
        write(tmp_path / "example.md", "SHOULD NOT APPEAR")
        assert "SHOULD NOT APPEAR" not in process_memory_file(tmp_path / "a.md")

    def test_home_relative_target(self, tmp_path):
        home = tmp_path / "home"
        write(home / "extra.md", "from home")
        write(tmp_path / "a.md", "A\n@~/extra.md")
        out = process_memory_file(tmp_path / "a.md", home=home)
        assert out.endswith("from home")

    def test_absolute_target(self, tmp_path):
        target = write(tmp_path / "abs.md", "absolute")
        write(tmp_path / "a.md", f"A\n@{target}")
        assert process_memory_file(tmp_path / "a.md").endswith("absolute")

    def test_relative_to_including_file(self, tmp_path):
        write(tmp_path / "sub" / "inner.md", "inner")
        write(tmp_path / "sub" / "a.md", "A\n@inner.md")
        write(tmp_path / "top.md", "T\n@sub/a.md")
        out = process_memory_file(tmp_path / "top.md")
        assert out == "T\n@sub/a.md\nA\n@inner.md\ninner"

    def test_unreadable_root_is_empty(self, tmp_path):
        assert process_memory_file(tmp_path / "nope.md") == ""

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_arbitrary_include_graphs_terminate(self, tmp_path_factory, data):
        n = data.draw(st.integers(min_value=1, max_value=10))
        edges = {
            i: data.draw(
                st.lists(
                    st.integers(min_value=0, max_value=n),  # n itself: missing
                    max_size=4,
                ),
                label=f"edges[{i}]",
            )
            for i in range(n)
        }
        root = tmp_path_factory.mktemp("inc")
        for i in range(n):
            body = [f"SENTINEL-{i}."]
            body += [f"@f{j}.md" for j in edges[i]]
            write(root / f"f{i}.md", "\n".join(body))
        out = process_memory_file(root / "f0.md")
        reachable = {0}
        frontier = [0]
        while frontier:
            node = frontier.pop()
            for target in edges[node]:
                if target < n and target not in reachable:
                    reachable.add(target)
                    frontier.append(target)
        for i in range(n):
            count = out.count(f"SENTINEL-{i}.")
            assert count == (1 if i in reachable else 0)


class TestDiscovery:
    def test_loading_order_and_levels(self, tmp_path):
        managed = tmp_path / "managed"
        home = tmp_path / "home"
        repo = tmp_path / "repo"
        sub = repo / "sub"
        write(managed / "CLAUDE.md", "managed policy")
        write(home / ".claude" / "CLAUDE.md", "user prefs")
        write(repo / "CLAUDE.md", "repo root")
        write(repo / ".claude" / "CLAUDE.md", "repo dot")
        write(repo / ".claude" / "rules" / "b.md", "rule b")
        write(repo / ".claude" / "rules" / "a.md", "rule a")
        write(repo / "CLAUDE.local.md", "local override")
        write(sub / "CLAUDE.md", "sub dir")
        sub.mkdir(exist_ok=True)
        found = discover_memory_files(sub, home=home, managed_root=managed)
        assert [(f.level, f.content) for f in found] == [
            (MemoryLevel.MANAGED, "managed policy"),
            (MemoryLevel.USER, "user prefs"),
            (MemoryLevel.PROJECT, "repo root"),
            (MemoryLevel.PROJECT, "repo dot"),
            (MemoryLevel.RULES, "rule a"),
            (MemoryLevel.RULES, "rule b"),
            (MemoryLevel.LOCAL, "local override"),
            (MemoryLevel.PROJECT, "sub dir"),
        ]

    def test_no_files_no_entries(self, tmp_path):
        cwd = tmp_path / "empty"
        cwd.mkdir()
        found = discover_memory_files(
            cwd, home=tmp_path / "h", managed_root=tmp_path / "m"
        )
        assert found == []

    def test_recent_user_memory_capped_at_five(self, tmp_path):
        home = tmp_path / "home"
        memory_dir = home / ".claude" / "memory"
        for i in range(7):
            path = write(memory_dir / f"note{i}.md", f"note {i}")
            os.utime(path, (1000 + i, 1000 + i))
        cwd = tmp_path / "p"
        cwd.mkdir()
        found = discover_memory_files(cwd, home=home, managed_root=tmp_path / "m")
        contents = [f.content for f in found]
        assert contents == ["note 6", "note 5", "note 4", "note 3", "note 2"]
        assert all(f.level is MemoryLevel.USER for f in found)

    def test_scope_is_owning_directory(self, tmp_path):
        repo = tmp_path / "repo"
        write(repo / "CLAUDE.md", "x")
        found = discover_memory_files(
            repo, home=tmp_path / "h", managed_root=tmp_path / "m"
        )
        assert found[0].directory_scope == str(repo)

    def test_includes_expanded_during_discovery(self, tmp_path):
        repo = tmp_path / "repo"
        write(repo / "extra.md", "more rules")
        write(repo / "CLAUDE.md", "main\n@extra.md")
        found = discover_memory_files(
            repo, home=tmp_path / "h", managed_root=tmp_path / "m"
        )
        assert found[0].content == "main\n@extra.md\nmore rules"


def make_assembler(tmp_path, cwd=None):
    cwd = cwd or tmp_path / "proj"
    cwd.mkdir(parents=True, exist_ok=True)
    return ContextAssembler(
        cwd=str(cwd),
        home=tmp_path / "home",
        managed_root=tmp_path / "managed",
        platform="linux",
    )


class TestAssemble:
    def test_system_prompt_parts(self, tmp_path):
        assembler = make_assembler(tmp_path)
        bundle = assembler.assemble("You are a coding agent.")
        lines = bundle.system_prompt.splitlines()
        assert lines[0] == "You are a coding agent."
        assert lines[1] == f"Working directory: {assembler.cwd}"
        assert lines[2] == "Platform: linux"

    def test_git_line_present_in_repo(self, tmp_path):
        cwd = tmp_path / "proj"
        cwd.mkdir()
        subprocess.run(["git", "init", "-q"], cwd=cwd, check=True)
        subprocess.run(
            ["git", "-c", "user.email=t@t", "-c", "user.name=t",
             "commit", "--allow-empty", "-q", "-m", "x"],
            cwd=cwd, check=True,
        )
        bundle = make_assembler(tmp_path, cwd).assemble("base")
        git_lines = [l for l in bundle.system_prompt.splitlines()
                     if l.startswith("git: branch ")]
        assert len(git_lines) == 1
        assert git_lines[0].endswith("clean")

    def test_git_line_reports_dirty_count(self, tmp_path):
        cwd = tmp_path / "proj"
        cwd.mkdir()
        subprocess.run(["git", "init", "-q"], cwd=cwd, check=True)
        subprocess.run(
            ["git", "-c", "user.email=t@t", "-c", "user.name=t",
             "commit", "--allow-empty", "-q", "-m", "x"],
            cwd=cwd, check=True,
        )
        write(cwd / "new.txt", "dirty")
        bundle = make_assembler(tmp_path, cwd).assemble("base")
        assert "1 changed file(s)" in bundle.system_prompt

    def test_no_git_line_outside_repo(self, tmp_path):
        bundle = make_assembler(tmp_path).assemble("base")
        assert "git:" not in bundle.system_prompt

    def test_memory_lands_in_user_message_not_system(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "CLAUDE.md", "always run the linter")
        bundle = make_assembler(tmp_path, cwd).assemble("base")
        assert "always run the linter" not in bundle.system_prompt
        text = bundle.user_context_message.text()
        assert f"# Instructions from {cwd / 'CLAUDE.md'}" in text
        assert "always run the linter" in text

    def test_date_line_last(self, tmp_path):
        bundle = make_assembler(tmp_path).assemble("base")
        last = bundle.user_context_message.text().splitlines()[-1]
        assert re.fullmatch(r"Today's date: \d{4}-\d{2}-\d{2}", last)

    def test_blank_memory_file_skipped(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "CLAUDE.md", "   \n  \n")
        bundle = make_assembler(tmp_path, cwd).assemble("base")
        assert "Instructions from" not in bundle.user_context_message.text()

    def test_conversation_passes_through(self, tmp_path):
        from conftest import user_msg

        assembler = make_assembler(tmp_path)
        msgs = [user_msg("hello")]
        bundle = assembler.assemble("base", msgs)
        assert bundle.conversation == tuple(msgs)

    def test_memoized_until_invalidated(self, tmp_path):
        cwd = tmp_path / "proj"
        memory = write(cwd / "CLAUDE.md", "version one")
        assembler = make_assembler(tmp_path, cwd)
        first = assembler.assemble("base")
        write(memory, "version two")
        cached = assembler.assemble("base")
        assert cached.user_context_message is first.user_context_message
        assert "version one" in cached.user_context_message.text()
        assembler.invalidate()
        fresh = assembler.assemble("base")
        assert "version two" in fresh.user_context_message.text()

    def test_memo_keyed_on_base_prompt(self, tmp_path):
        assembler = make_assembler(tmp_path)
        first = assembler.assemble("base one")
        other = assembler.assemble("base two")
        assert other.system_prompt.splitlines()[0] == "base two"
        assert first.system_prompt.splitlines()[0] == "base one"


class TestLazyRules:
    def test_read_activates_subdir_files(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "api" / "CLAUDE.md", "api conventions")
        target = write(cwd / "api" / "handler.py", "code")
        assembler = make_assembler(tmp_path, cwd)
        newly = assembler.lazy_load_rules(str(target))
        assert [f.content for f in newly] == ["api conventions"]
        assert newly[0].level is MemoryLevel.PROJECT
        assert newly[0].directory_scope == str(cwd / "api")

    def test_second_read_is_quiet(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "api" / "CLAUDE.md", "api conventions")
        target = write(cwd / "api" / "handler.py", "code")
        assembler = make_assembler(tmp_path, cwd)
        assembler.lazy_load_rules(str(target))
        assert assembler.lazy_load_rules(str(target)) == []

    def test_activation_reaches_next_assemble(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "api" / "CLAUDE.md", "api conventions")
        target = write(cwd / "api" / "handler.py", "code")
        assembler = make_assembler(tmp_path, cwd)
        before = assembler.assemble("base")
        assert "api conventions" not in before.user_context_message.text()
        assembler.lazy_load_rules(str(target))
        after = assembler.assemble("base")
        assert "api conventions" in after.user_context_message.text()

    def test_nested_dirs_activate_deepest_first(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "a" / "CLAUDE.md", "outer")
        write(cwd / "a" / "b" / "CLAUDE.md", "inner")
        target = write(cwd / "a" / "b" / "f.txt", "x")
        assembler = make_assembler(tmp_path, cwd)
        newly = assembler.lazy_load_rules(str(target))
        assert [f.content for f in newly] == ["inner", "outer"]

    def test_read_outside_cwd_inert(self, tmp_path):
        outside = write(tmp_path / "elsewhere" / "f.txt", "x")
        assembler = make_assembler(tmp_path)
        assert assembler.lazy_load_rules(str(outside)) == []

    def test_read_in_cwd_itself_inert(self, tmp_path):
        cwd = tmp_path / "proj"
        target = write(cwd / "f.txt", "x")
        write(cwd / "CLAUDE.md", "root level")
        assembler = make_assembler(tmp_path, cwd)
        assert assembler.lazy_load_rules(str(target)) == []

    def test_level_classification(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "api" / "CLAUDE.md", "p")
        write(cwd / "api" / "CLAUDE.local.md", "l")
        write(cwd / "api" / ".claude" / "rules" / "r.md", "r")
        target = write(cwd / "api" / "f.txt", "x")
        assembler = make_assembler(tmp_path, cwd)
        newly = assembler.lazy_load_rules(str(target))
        levels = {f.content: f.level for f in newly}
        assert levels == {
            "p": MemoryLevel.PROJECT,
            "r": MemoryLevel.RULES,
            "l": MemoryLevel.LOCAL,
        }

    def test_dir_path_activates_itself(self, tmp_path):
        cwd = tmp_path / "proj"
        write(cwd / "api" / "CLAUDE.md", "api conventions")
        assembler = make_assembler(tmp_path, cwd)
        newly = assembler.lazy_load_rules(str(cwd / "api"))
        assert [f.content for f in newly] == ["api conventions"]
