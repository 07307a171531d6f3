import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

PROJECT_ROOT = Path(__file__).parent
sys.path.insert(0, str(PROJECT_ROOT))

from cli.commands import run_command
from cli.parser import build_parser


def main(argv: Optional[List[str]] = None) -> int:
    # .env 中可设置 DNERV_THREADS
    load_dotenv()

    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    return run_command(args.handler, args)


if __name__ == "__main__":
    sys.exit(main())
