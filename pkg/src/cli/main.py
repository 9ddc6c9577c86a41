"""
Main CLI entry point for ObstacleFusion (Click implementation).
"""

from typing import Optional

import click

from src import __version__
from src.cli.commands import (
    CliContext,
    build_graph_command,
    cross_validate_command,
    evaluate_command,
    extract_features_command,
    infer,
    segment,
    synth,
    train,
)
from src.core.config import Config
from src.core.exceptions import FusionError
from src.utils.logging_config import setup_logging


LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']


class FusionGroup(click.Group):
    """Group reporting errors as ``error[<category>]: message`` on stderr.

    Exit status is 2 for ObstacleFusion errors and 1 for anything unexpected.
    """

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except FusionError as e:
            click.echo(f"error[{e.category}]: {e}", err=True)
            ctx.exit(2)
        except Exception as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            ctx.exit(1)


@click.group(cls=FusionGroup)
@click.version_option(version=__version__, prog_name='obstacle-fusion')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='YAML file merged over the packaged config/config.yaml')
@click.option('--seed', type=int, default=None, help='Override pipeline.seed')
@click.option('--threads', type=click.IntRange(min=1), default=None, help='Override pipeline.threads')
@click.option('--log-level', type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None,
              help='Override logging.level')
@click.option('--verbose', '-v', is_flag=True, help='Progress bars and fold details')
@click.pass_context
def main(ctx: click.Context, config_path: Optional[str], seed: Optional[int], threads: Optional[int],
         log_level: Optional[str], verbose: bool):
    """ObstacleFusion - lidar/camera obstacle detection with a fusion CRF."""
    config = Config(config_path)
    config.validate()
    setup_logging(config.logging_config, log_level)
    ctx.obj = CliContext(config=config, seed=seed, threads=threads, verbose=verbose)


main.add_command(synth)
main.add_command(extract_features_command)
main.add_command(segment)
main.add_command(build_graph_command)
main.add_command(train)
main.add_command(infer)
main.add_command(evaluate_command)
main.add_command(cross_validate_command)


if __name__ == '__main__':
    main(prog_name='obstacle-fusion')
