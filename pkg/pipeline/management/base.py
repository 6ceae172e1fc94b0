import logging
import os

from django.core.management.base import BaseCommand, CommandError
from threadpoolctl import threadpool_limits

from dataset.exceptions import DatasetValidationError
from network.services import AudioConditionedUNet
from tensorcore.exceptions import ConfigurationError, PagetrackError

from ..config import RunConfig

logger = logging.getLogger(__name__)

RUNTIME_FAILURE, USAGE_ERROR = 1, 2


def usage_error(message):
    return CommandError(message, returncode=USAGE_ERROR)


def runtime_failure(message):
    return CommandError(message, returncode=RUNTIME_FAILURE)


class PipelineCommand(BaseCommand):
    """
    Base of the pipeline commands. Resolves the run config (defaults < --config
    file < flags), limits BLAS threads and turns pipeline errors into exit
    codes: 2 for usage and configuration errors, 1 for runtime failures.
    """

    def add_arguments(self, parser):
        parser.add_argument("--config", help="YAML file of key: value settings")
        parser.add_argument("--threads", type=int, help="BLAS threads; 1 makes runs bit-reproducible")
        parser.add_argument("--seed", type=int, help="root seed of every random choice")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def overrides(self, options):
        """Run config keys set by this command's flags."""
        return {}

    def run(self, config, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            config = RunConfig.resolve(
                options["config"], seed=options["seed"], threads=options["threads"], **self.overrides(options)
            )
            with threadpool_limits(limits=config["threads"] or None):
                self.run(config, options)
        except ConfigurationError as e:
            raise usage_error(str(e)) from e
        except DatasetValidationError as e:
            for piece, messages in sorted(e.errors.items()):
                for message in messages:
                    self.stderr.write(f"{piece}: {message}")
            raise runtime_failure(f"{len(e.errors)} invalid piece(s)") from e
        except (PagetrackError, OSError) as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]} failed: {e}")
            raise runtime_failure(str(e)) from e


def load_trained_model(path, config):
    """The given model file, or best.model of the run directory."""
    path = path or os.path.join(config["output_dir"], "best.model")
    if not os.path.isfile(path):
        raise runtime_failure(f"model file {path} not found")
    return AudioConditionedUNet.from_file(path)
