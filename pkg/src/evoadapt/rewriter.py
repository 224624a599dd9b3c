"""Lookup-table rewriting of candidate code for half-precision execution.

Some numeric library calls have no fp16 kernels; each table entry swaps one
of them for a wrapper that upcasts, computes in fp32 and casts back.  The
wrapper definitions (preamble lines) are prepended exactly once.

Matching is token-boundary aware and skips string literals and comments:
plain substring substitution would corrupt identifiers like
``torch.zeros_like`` when rewriting ``torch.zeros``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

_IDENT = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_")


@dataclass(frozen=True)
class RewriteRule:
    source: str
    preamble: str
    replacement: str


class RewriteTable:
    def __init__(self, rules: list[RewriteRule]):
        seen = set()
        for rule in rules:
            if rule.source in seen:
                raise ValueError(f"duplicate source identifier {rule.source!r}")
            seen.add(rule.source)
        self.rules = list(rules)
        # longest source first so shared prefixes resolve to the longer match
        self._ordered = sorted(self.rules, key=lambda r: -len(r.source))
        self._preamble_lines = {r.preamble for r in self.rules}

    @classmethod
    def from_lines(cls, lines) -> "RewriteTable":
        rules = []
        for line in lines:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"expected 3 tab-separated fields, got: {line!r}")
            rules.append(RewriteRule(*parts))
        return cls(rules)

    @classmethod
    def from_file(cls, path) -> "RewriteTable":
        with open(path, encoding="utf-8") as f:
            return cls.from_lines(f)

    @classmethod
    def default(cls) -> "RewriteTable":
        text = resources.files("evoadapt.data").joinpath("rewrite_table.tsv").read_text("utf-8")
        return cls.from_lines(text.splitlines())


def _skip_string(code: str, i: int) -> int:
    """Return the index just past the string literal starting at ``i``."""
    quote = code[i]
    if code[i : i + 3] in ('"""', "'''"):
        fence = code[i : i + 3]
        j = i + 3
        while j < len(code):
            if code[j] == "\\":
                j += 2
                continue
            if code[j : j + 3] == fence:
                return j + 3
            j += 1
        return len(code)
    j = i + 1
    while j < len(code):
        ch = code[j]
        if ch == "\\":
            j += 2
            continue
        if ch == quote or ch == "\n":
            return j + 1
        j += 1
    return len(code)


def _match_at(code: str, i: int, ordered) -> "RewriteRule | None":
    if i > 0 and (code[i - 1] in _IDENT or code[i - 1] == "."):
        return None
    for rule in ordered:
        end = i + len(rule.source)
        if code[i:end] == rule.source:
            if end < len(code) and code[end] in _IDENT:
                continue
            return rule
    return None


def _rewrite_body(code: str, table: RewriteTable) -> tuple[str, dict[str, int]]:
    out = []
    counts: dict[str, int] = {}
    i = 0
    n = len(code)
    while i < n:
        ch = code[i]
        if ch == "#":
            j = code.find("\n", i)
            j = n if j < 0 else j + 1
            out.append(code[i:j])
            i = j
            continue
        if ch in "\"'":
            j = _skip_string(code, i)
            out.append(code[i:j])
            i = j
            continue
        rule = _match_at(code, i, table._ordered)
        if rule is not None:
            out.append(rule.replacement)
            counts[rule.source] = counts.get(rule.source, 0) + 1
            i += len(rule.source)
            continue
        out.append(ch)
        i += 1
    return "".join(out), counts


def _split_preamble(code: str, table: RewriteTable) -> tuple[list[str], str]:
    present = []
    rest = code
    while True:
        line, sep, tail = rest.partition("\n")
        if sep and line in table._preamble_lines:
            present.append(line)
            rest = tail
        else:
            return present, rest


def rewrite_stats(code: str, table: "RewriteTable | None" = None) -> dict[str, int]:
    """Occurrence counts the rewriter would replace, per source identifier."""
    table = table or RewriteTable.default()
    _, body = _split_preamble(code, table)
    return _rewrite_body(body, table)[1]


def to_half_precision(code: str, table: "RewriteTable | None" = None) -> str:
    """Rewrite ``code`` via the lookup table; byte-idempotent on re-application."""
    table = table or RewriteTable.default()
    present, body = _split_preamble(code, table)
    new_body, counts = _rewrite_body(body, table)
    needed = list(present)
    for rule in table.rules:  # declaration order, deduplicated
        if counts.get(rule.source) and rule.preamble not in needed:
            needed.append(rule.preamble)
    # keep stable order: table order for everything we know about
    ordered = [p for p in _table_preamble_order(table) if p in needed]
    return "".join(p + "\n" for p in ordered) + new_body


def _table_preamble_order(table: RewriteTable) -> list[str]:
    seen = []
    for rule in table.rules:
        if rule.preamble not in seen:
            seen.append(rule.preamble)
    return seen
