import argparse
import logging
import sys

from .client import run

DEFAULT_ENDPOINT = "127.0.0.1:9400"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bridge-trainer",
        description="serve training requests from a node's bridge port",
    )
    parser.add_argument("--endpoint", default=DEFAULT_ENDPOINT, help="node bridge host:port")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return run(args.endpoint)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
