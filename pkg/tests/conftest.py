"""Shared fixtures: a small five-tool registry, synthetic contracts, caches."""

from __future__ import annotations

import re
import textwrap
from pathlib import Path

import pytest

from scanmux.model import ResourceLimits
from scanmux.plan import build_plan, canonicalize_args, discover_contracts
from scanmux.registry import load_registry
from scanmux.solc import CompilerCache, MockCompilerFetcher, ReleaseIndex, SemVer

# Five mock tools with the same kind of format-support spread the real
# registry has: 3 take Solidity, 2 take creation bytecode, 4 take runtime.
MOCK_TOOLS = {
    "alpha": dict(
        version="1.0",
        formats=["solidity"],
        needs_compiler=True,
        command={"solidity": "alpha-scan {contract} --solc {compiler} -o {output}"},
    ),
    "bravo": dict(
        version="2.1",
        formats=["solidity", "creation", "runtime"],
        needs_compiler=True,
        command={
            "solidity": "bravo -s {contract} --solc {compiler}",
            "creation": "bravo -c {contract}",
            "runtime": "bravo -r {contract}",
        },
    ),
    "charlie": dict(
        version="0.9",
        formats=["runtime"],
        needs_compiler=False,
        command={"runtime": "charlie {contract}"},
    ),
    "delta": dict(
        version="1.2",
        formats=["solidity", "runtime"],
        needs_compiler=False,
        command={"solidity": "delta --source {contract}", "runtime": "delta --code {contract}"},
    ),
    "echo": dict(
        version="5.0",
        formats=["creation", "runtime"],
        needs_compiler=False,
        command={"creation": "echo-scan -i {contract}", "runtime": "echo-scan -r {contract}"},
    ),
}

MOCK_PARSER = """\
schema: 1
parsers:
  default:
    kind: line_patterns
    findings:
      - pattern: 'VULN: (?P<label>[A-Za-z ]+?)(?: at line (?P<line>\\d+))?$'
        label: finding
      - pattern: 'WEAKNESS-(?P<offset>0x[0-9a-fA-F]+)'
        label: Weakness
    errors:
      - '^ERROR:'
      - 'compilation failed'
"""


def write_tool_dir(
    root: Path,
    tool_id: str,
    version: str,
    formats: list[str],
    command: dict[str, str],
    needs_compiler: bool = False,
    parser_yaml: str = MOCK_PARSER,
    image: str | None = None,
) -> Path:
    tool_dir = root / tool_id
    tool_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "schema: 1",
        f"id: {tool_id}",
        f"version: '{version}'",
        f"image: {image or f'example.io/mock/{tool_id}:{version}'}",
        "formats:",
        *[f"  - {f}" for f in formats],
        "command:",
        *[f"  {fmt}: '{tpl}'" for fmt, tpl in command.items()],
    ]
    if needs_compiler:
        lines.append("needs_compiler: true")
    lines.append("parser: default")
    (tool_dir / "config.yaml").write_text("\n".join(lines) + "\n")
    (tool_dir / "parser.yaml").write_text(parser_yaml)
    return tool_dir


@pytest.fixture
def mock_registry_dir(tmp_path: Path) -> Path:
    reg = tmp_path / "registry"
    for tool_id, spec in MOCK_TOOLS.items():
        write_tool_dir(
            reg,
            tool_id,
            spec["version"],
            spec["formats"],
            spec["command"],
            needs_compiler=spec["needs_compiler"],
        )
    return reg


@pytest.fixture
def mock_registry(mock_registry_dir: Path):
    return load_registry(mock_registry_dir)


SOL_PRAGMAS = [
    "^0.4.24",
    "^0.5.0",
    ">=0.4.11 <0.6.0",
    "0.8.4",
    "~0.6.2",
    ">=0.7.0",
]


def write_corpus(root: Path, n_sol: int = 12, n_creation: int = 4, n_runtime: int = 4) -> Path:
    """Synthetic contracts: .sol with rotating pragmas, plus hex dumps."""
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_sol):
        pragma = SOL_PRAGMAS[i % len(SOL_PRAGMAS)]
        (root / f"c{i:02d}.sol").write_text(
            textwrap.dedent(
                f"""\
                pragma solidity {pragma};

                contract C{i} {{
                    uint public value = {i};
                }}
                """
            )
        )
    for i in range(n_creation):
        (root / f"d{i:02d}.hex").write_text("60806040" + f"{i:02x}" * 4)
    for i in range(n_runtime):
        (root / f"r{i:02d}.rt.hex").write_text("6080fdfe" + f"{i:02x}" * 4)
    return root


@pytest.fixture
def corpus_dir(tmp_path: Path) -> Path:
    return write_corpus(tmp_path / "contracts")


@pytest.fixture
def compiler_cache(tmp_path: Path) -> CompilerCache:
    return CompilerCache(tmp_path / "compilers")


@pytest.fixture
def release_index() -> ReleaseIndex:
    from scanmux.paths import bundled_release_index

    return ReleaseIndex.load(bundled_release_index())


def plan_for(
    contracts,
    registry,
    cache,
    release_index,
    backend,
    tools="all",
    seed: int = 0,
    scheme: str = "{runid}/{filename}/{toolid}",
    timeout: float = 600.0,
):
    """Build a plan the way the CLI does, minus the argument parsing."""
    limits = ResourceLimits(wall_timeout=timeout)
    canonical = canonicalize_args(
        tools=tools if isinstance(tools, str) else list(tools),
        files=[c.id for c in contracts],
        wall_timeout=limits.wall_timeout,
        memory_bytes=limits.memory_bytes,
        cpu_quota=limits.cpu_quota,
        seed=seed,
        scheme=scheme,
        backend="mock",
        registry_digest=registry.content_digest,
    )
    return build_plan(
        contracts,
        registry,
        tools,
        scheme,
        limits,
        seed,
        cache=cache,
        fetcher=MockCompilerFetcher(),
        release_index=release_index,
        backend=backend,
        created_with_args=canonical,
    )


def discover_corpus(corpus: Path):
    return discover_contracts([str(corpus / "*")])


def semver(text: str) -> SemVer:
    return SemVer.parse(text)


# One verdict line per acceptance criterion in the terminal summary, so the
# pass/fail state of each is visible without grepping the dot output.
_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_criterion_" not in name:
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return

    def order(name: str):
        match = re.search(r"test_criterion_(\d+)", name)
        return (int(match.group(1)) if match else 999, name)

    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=order):
        verdict = "PASS" if _CRITERIA[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{name}: {verdict}")
