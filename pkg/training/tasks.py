import logging

from celery import shared_task

from dataset.storage import load_dataset
from network.config import ModelConfig
from tensorcore.exceptions import PagetrackError

from .services import TrainConfig, train

logger = logging.getLogger(__name__)


@shared_task
def train_model_task(data_dir, output_dir, model_config, train_config):
    """
    Full training run on a worker. Configs arrive as plain dicts; returns the
    run summary.
    """
    try:
        dataset = load_dataset(data_dir)
        result = train(dataset, ModelConfig.from_dict(model_config), TrainConfig.from_dict(train_config), output_dir)
        logger.info(f"Training finished for {data_dir}, best epoch {result.best_epoch}")
        return result.summary()
    except PagetrackError as e:
        logger.error(f"Training failed for {data_dir}: {e}")
        raise
