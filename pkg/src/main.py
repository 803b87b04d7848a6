"""Command line entry point: run scenarios, print metrics, tell the split story."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

# Add the repository root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config.settings import AppConfig
from src.core.errors import LeasewireError
from src.core.harness import ClientMode, RunMetrics, demo_split, load_scenario, run_scenario, summarize

EXIT_OK = 0
EXIT_LOSS = 1
EXIT_USAGE = 2


class Application:
    """Wires configuration and logging, then runs one CLI command."""

    def __init__(self, config: AppConfig):
        self._config = config
        self._logger = self._setup_logging()

    def _setup_logging(self) -> logging.Logger:
        """Setup application logging; stdout is reserved for metrics."""
        logging.basicConfig(
            level=getattr(logging, self._config.log_level),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[logging.StreamHandler(sys.stderr)],
        )
        return logging.getLogger(__name__)

    def run(self, args: argparse.Namespace) -> int:
        scenario = load_scenario(args.scenario, self._config)
        if args.seed is not None:
            scenario = scenario.with_seed(args.seed)
        if args.client is not None:
            scenario = scenario.with_mode(ClientMode(args.client))

        self._logger.info(f"Running {args.trials} trial(s) of {args.scenario} from seed {scenario.seed}")
        trials: List[RunMetrics] = []
        for offset in range(args.trials):
            metrics, trace = run_scenario(scenario.with_seed(scenario.seed + offset), self._config)
            trials.append(metrics)
            print(metrics.to_line())
            if offset == 0 and args.trace:
                Path(args.trace).write_bytes(trace.to_bytes())
                print(f"trace_hash={metrics.trace_hash:016x} trace={args.trace}")
        print(summarize(trials))

        lossy = [m.seed for m in trials if m.ops_lost > 0]
        if lossy:
            self._logger.warning(f"Lost acknowledged puts in {len(lossy)} trial(s), first seed {lossy[0]}")
        if args.assert_no_loss and lossy:
            return EXIT_LOSS
        return EXIT_OK

    def demo(self, args: argparse.Namespace) -> int:
        for line in demo_split(self._config):
            print(line)
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leasewire", description="Lease-resolved RPC simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a scenario file")
    run.add_argument("--scenario", required=True, help="scenario file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trials", type=int, default=1, help="number of trials, seeds seed..seed+N-1")
    run.add_argument("--trace", default=None, help="write the first trial's trace to this file")
    run.add_argument("--assert-no-loss", action="store_true", help="exit 1 if any acknowledged put was lost")
    run.add_argument("--client", choices=[m.value for m in ClientMode], default=None,
                     help="override the scenario's client mode")

    demo = commands.add_parser("demo", help="built-in stories")
    demo.add_argument("story", choices=["split"])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv and run; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    load_dotenv()
    try:
        config = AppConfig.from_env()
    except ValueError as e:
        print(f"leasewire: bad configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    errors = config.validate()
    if errors:
        print(f"leasewire: configuration errors: {errors}", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "trials", 1) < 1:
        print("leasewire: --trials must be at least 1", file=sys.stderr)
        return EXIT_USAGE

    app = Application(config)
    try:
        if args.command == "run":
            return app.run(args)
        return app.demo(args)
    except LeasewireError as e:
        print(f"leasewire: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"leasewire: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
