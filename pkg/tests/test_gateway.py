from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoadapt import errors
from evoadapt.gateway import (
    CONSTRAINTS,
    FS_SIGNATURE,
    JOINT_SIGNATURE,
    LOGITS_SIGNATURE,
    TRUNCATION_FLAG,
    EndpointConfig,
    HttpGateway,
    ParentAlgorithm,
    PromptSpec,
    ScriptedGateway,
    build_prompt,
    estimate_tokens,
    parse_algorithm,
    render_algorithm,
)

P1 = ParentAlgorithm(thoughts="cache of train features", code="def compute_logits(...):\n    return z")
P2 = ParentAlgorithm(thoughts="gaussian classifier", code="def compute_logits(...):\n    return q")
PF = ParentAlgorithm(thoughts="variance criterion", code="def feat_selection(...):\n    return idx")


class TestBuildPrompt:
    def test_crossover_logits_contains_parents_and_signature(self):
        text = build_prompt(PromptSpec("crossover", "logits_computation", [P1, P2]))
        assert P1.code in text and P2.code in text
        assert LOGITS_SIGNATURE in text
        assert "totally different form" in text
        assert CONSTRAINTS in text

    def test_mutation_fs_contains_signature(self):
        text = build_prompt(PromptSpec("mutation", "feature_selection", [PF]))
        assert FS_SIGNATURE in text
        assert "select the best feature channels" in text

    def test_joint_signature(self):
        text = build_prompt(PromptSpec("crossover", "joint", [P1, P2]))
        assert JOINT_SIGNATURE in text
        assert "compute_logits_with_fs" in text

    def test_deterministic(self):
        spec = PromptSpec("crossover", "logits_computation", [P1, P2])
        assert build_prompt(spec) == build_prompt(spec)

    def test_parent_order_preserved(self):
        text = build_prompt(PromptSpec("crossover", "logits_computation", [P1, P2]))
        assert text.index(P1.thoughts) < text.index(P2.thoughts)

    def test_budget_truncates_oldest_code_first(self):
        big1 = ParentAlgorithm("old parent", "x = 0\n" * 2000)
        big2 = ParentAlgorithm("new parent", "y = 1\n" * 50)
        spec = PromptSpec("crossover", "logits_computation", [big1, big2], char_budget=4000)
        text = build_prompt(spec)
        assert len(text) <= 4000
        assert TRUNCATION_FLAG in text
        assert "x = 0" not in text     # oldest code dropped
        assert "y = 1" in text         # newest retained
        assert "old parent" in text    # thoughts always retained

    def test_invalid_specs(self):
        with pytest.raises(errors.InvalidPromptSpec):
            build_prompt(PromptSpec("crossover", "logits_computation", [P1]))
        with pytest.raises(errors.InvalidPromptSpec):
            build_prompt(PromptSpec("mutation", "logits_computation", [P1, P2]))
        with pytest.raises(errors.InvalidPromptSpec):
            build_prompt(PromptSpec("mutation", "nope", [P1]))


class TestParse:
    def test_happy_path(self):
        thoughts, code = parse_algorithm(
            "{uses class means} ```\ndef compute_logits(x):\n    return x\n```"
        )
        assert thoughts == "uses class means"
        assert code == "def compute_logits(x):\n    return x"

    def test_language_tag_stripped(self):
        _, code = parse_algorithm("{t} ```python\nreturn 1\n```")
        assert code == "return 1"

    def test_no_thoughts(self):
        with pytest.raises(errors.NoThoughts):
            parse_algorithm("no braces ```\ncode\n```")

    def test_no_code(self):
        with pytest.raises(errors.NoCode):
            parse_algorithm("{thoughts only}")

    def test_first_fenced_block_wins(self):
        _, code = parse_algorithm("{t}\n```\nfirst\n```\n```\nsecond\n```")
        assert code == "first"

    def test_empty_sections_rejected(self):
        with pytest.raises(errors.NoThoughts):
            parse_algorithm("{   } ```\ncode\n```")
        with pytest.raises(errors.NoCode):
            parse_algorithm("{t} ```\n   \n```")

    @given(
        st.text(st.characters(blacklist_characters="{}`"), min_size=1).filter(str.strip),
        st.text(st.characters(blacklist_characters="`"), min_size=1)
        .filter(str.strip).filter(lambda s: not s.endswith("\n")),
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, thoughts, code):
        rendered = render_algorithm(thoughts.strip(), code)
        t, c = parse_algorithm(rendered)
        assert t == thoughts.strip()
        assert c == code


class TestScripted:
    def test_cycles(self):
        gw = ScriptedGateway(["a", "b", "c"])
        outs = [gw.complete("p")[0] for _ in range(4)]
        assert outs == ["a", "b", "c", "a"]

    def test_usage_formula(self):
        gw = ScriptedGateway(["abcde"])
        _, usage = gw.complete("x" * 10)
        assert usage.input_tokens == estimate_tokens("x" * 10) == 3
        assert usage.output_tokens == 2

    def test_usage_additive(self):
        gw = ScriptedGateway(["aaaa", "bbbbbbbb"])
        gw.complete("pppp")
        gw.complete("pp")
        calls, tin, tout = gw.usage.snapshot()
        assert calls == 2
        assert tin == 1 + 1
        assert tout == 1 + 2


class _Script(BaseHTTPRequestHandler):
    script_codes: list = []
    hits = 0

    def do_POST(self):
        self.rfile.read(int(self.headers.get("Content-Length", "0")))
        code = type(self).script_codes[min(type(self).hits, len(type(self).script_codes) - 1)]
        type(self).hits += 1
        if code == 200:
            body = json.dumps({
                "choices": [{"message": {"content": "{t} ```\ncode\n```"}}],
                "usage": {"prompt_tokens": 12, "completion_tokens": 7},
            }).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        else:
            self.send_response(code)
            self.send_header("Content-Length", "0")
            self.end_headers()

    def log_message(self, *a):
        pass


@pytest.fixture
def stub_server():
    def start(responses):
        handler = type("H", (_Script,), {"script_codes": responses, "hits": 0})
        server = HTTPServer(("127.0.0.1", 0), handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server, handler

    servers = []

    def factory(responses):
        server, handler = start(responses)
        servers.append(server)
        return f"http://127.0.0.1:{server.server_port}", handler

    yield factory
    for server in servers:
        server.shutdown()


class TestHttpGateway:
    def test_success_and_usage(self, stub_server):
        url, _ = stub_server([200])
        gw = HttpGateway(EndpointConfig(base_url=url, model="m"), sleep=lambda s: None)
        text, usage = gw.complete("hello")
        assert text == "{t} ```\ncode\n```"
        assert (usage.input_tokens, usage.output_tokens) == (12, 7)

    def test_retries_then_success(self, stub_server):
        url, handler = stub_server([500, 500, 200])
        gw = HttpGateway(EndpointConfig(base_url=url, model="m"), sleep=lambda s: None)
        text, _ = gw.complete("hello")
        assert handler.hits == 3
        assert "code" in text

    def test_gives_up_after_retries(self, stub_server):
        url, handler = stub_server([500])
        gw = HttpGateway(EndpointConfig(base_url=url, model="m", max_retries=3),
                         sleep=lambda s: None)
        with pytest.raises(errors.GatewayError):
            gw.complete("hello")
        assert handler.hits == 3

    def test_unreachable_host(self):
        gw = HttpGateway(
            EndpointConfig(base_url="http://127.0.0.1:9", model="m", timeout_s=0.2),
            sleep=lambda s: None,
        )
        with pytest.raises(errors.GatewayError):
            gw.complete("hello")

    def test_auth_error_no_retry(self, stub_server):
        url, handler = stub_server([401])
        gw = HttpGateway(EndpointConfig(base_url=url, model="m"), sleep=lambda s: None)
        with pytest.raises(errors.AuthError):
            gw.complete("hello")
        assert handler.hits == 1
