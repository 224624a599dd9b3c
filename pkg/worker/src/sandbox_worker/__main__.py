from __future__ import annotations

import argparse

from .server import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sandbox_worker",
                                     description="candidate-code evaluation worker")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--data-root", default=None)
    parser.add_argument("--max-seconds", type=float, default=60.0)
    parser.add_argument("--half", action="store_true",
                        help="bind fp16 task tensors instead of fp32")
    args = parser.parse_args(argv)
    serve(args.port, args.data_root, args.max_seconds, args.half)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
