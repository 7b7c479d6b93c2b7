"""
Toy split classifier and its synthetic dataset.

The edge half f_E (parameter group mu) maps a 1 x S x S image to the split
feature (C, S/2, S/2); the cloud half f_T (group lambda) maps a feature to
class logits. Anything that consumes features (codec, simnet, harq) goes
through extract_features / execute_task only.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np

from checkpoints import ModelParams
from tensor_core import (Adam, ParamGroup, Tensor, avg_pool2, conv_block, dense_block, flatten, no_grad, relu,
                         softmax_cross_entropy)
from utils.config_loader import get_config_value
from utils.rng import PURPOSE_DATA, PURPOSE_INIT, name_tag, substream
from utils.training import accuracy, run_epochs

logger = logging.getLogger(__name__)

DATASET_FILE = 'toy_dataset.npz'
EVAL_BATCH = 500


@dataclass
class ToyDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def num_classes(self):
        return int(max(self.train_y.max(), self.test_y.max())) + 1


@dataclass
class BackboneConfig:
    num_classes: int = 8
    image_size: int = 8
    hidden_channels: int = 8
    split_shape: tuple = (16, 4, 4)

    @classmethod
    def from_config(cls, config):
        return cls(
            num_classes=get_config_value(config, 'dataset', 'num_classes', default=8),
            image_size=get_config_value(config, 'dataset', 'image_size', default=8),
            hidden_channels=get_config_value(config, 'backbone', 'hidden_channels', default=8),
            split_shape=tuple(get_config_value(config, 'backbone', 'split_shape', default=[16, 4, 4])),
        )


def generate_dataset(num_classes=8, image_size=8, train_size=8000, test_size=2000, noise_std=1.5, seed=0):
    """Gaussian-cluster images: one random prototype per class plus i.i.d. pixel noise."""
    rng = substream(PURPOSE_DATA, seed)
    prototypes = rng.normal(0.0, 1.0, size=(num_classes, 1, image_size, image_size))

    def draw(count):
        labels = rng.integers(0, num_classes, size=count)
        images = prototypes[labels] + rng.normal(0.0, noise_std, size=(count, 1, image_size, image_size))
        return images, labels.astype(np.int64)

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    return ToyDataset(train_x, train_y, test_x, test_y)


def dataset_from_config(config):
    return generate_dataset(
        num_classes=get_config_value(config, 'dataset', 'num_classes', default=8),
        image_size=get_config_value(config, 'dataset', 'image_size', default=8),
        train_size=get_config_value(config, 'dataset', 'train_size', default=8000),
        test_size=get_config_value(config, 'dataset', 'test_size', default=2000),
        noise_std=get_config_value(config, 'dataset', 'noise_std', default=1.5),
        seed=get_config_value(config, 'experiment', 'seed', default=0),
    )


def save_dataset(dataset, data_dir):
    os.makedirs(data_dir, exist_ok=True)
    path = os.path.join(data_dir, DATASET_FILE)
    np.savez(path, train_x=dataset.train_x, train_y=dataset.train_y,
             test_x=dataset.test_x, test_y=dataset.test_y)
    logger.info(f"Wrote {len(dataset.train_y)} train / {len(dataset.test_y)} test samples to {path}")
    return path


def load_dataset(data_dir):
    path = os.path.join(data_dir, DATASET_FILE)
    with np.load(path) as data:
        return ToyDataset(data['train_x'], data['train_y'], data['test_x'], data['test_y'])


def init_backbone(cfg: BackboneConfig, seed):
    rng = substream(PURPOSE_INIT, seed, name_tag('backbone'))
    channels, height, width = cfg.split_shape
    mu = ParamGroup('mu')
    mu.add_conv('conv1', 1, cfg.hidden_channels, 3, rng)
    mu.add_conv('conv2', cfg.hidden_channels, channels, 3, rng)
    lam = ParamGroup('lambda')
    lam.add_conv('conv3', channels, channels, 3, rng)
    lam.add_conv('conv4', channels, channels, 1, rng)
    lam.add_linear('fc', channels * height * width, cfg.num_classes, rng)
    params = ModelParams()
    params.add(mu)
    params.add(lam)
    return params


def extract_features(x: Tensor, mu: ParamGroup) -> Tensor:
    """f_E: (N, 1, S, S) images -> (N, C, S/2, S/2) split features."""
    h = relu(conv_block(x, mu, 'conv1'))
    h = avg_pool2(h)
    return relu(conv_block(h, mu, 'conv2'))


def execute_task(feature: Tensor, lam: ParamGroup) -> Tensor:
    """f_T: split features -> (N, num_classes) logits."""
    h = relu(conv_block(feature, lam, 'conv3'))
    h = relu(conv_block(h, lam, 'conv4'))
    return dense_block(flatten(h), lam, 'fc')


def classify(x: Tensor, params: ModelParams) -> Tensor:
    return execute_task(extract_features(x, params['mu']), params['lambda'])


def batched_features(images, params: ModelParams, batch_size=EVAL_BATCH):
    with no_grad():
        chunks = [extract_features(Tensor(images[i:i + batch_size]), params['mu']).data
                  for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def evaluate_backbone(params: ModelParams, images, labels, batch_size=EVAL_BATCH):
    with no_grad():
        logits = np.concatenate([classify(Tensor(images[i:i + batch_size]), params).data
                                 for i in range(0, len(images), batch_size)], axis=0)
    return accuracy(logits, labels)


def train_backbone(dataset: ToyDataset, cfg: BackboneConfig, seed, epochs=10, lr=1e-3, batch_size=64,
                   betas=(0.9, 0.999), eps=1e-8):
    """Train mu and lambda on the toy task; returns (params, held-out accuracy)."""
    params = init_backbone(cfg, seed)
    optimizer = Adam(params.select(('mu', 'lambda')), lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(indices, epoch, batch):
        optimizer.zero_grad()
        logits = classify(Tensor(dataset.train_x[indices]), params)
        loss = softmax_cross_entropy(logits, dataset.train_y[indices])
        loss.backward()
        optimizer.step()
        return loss.item()

    run_epochs('train-backbone', epochs, len(dataset.train_y), batch_size, seed, step)
    test_acc = evaluate_backbone(params, dataset.test_x, dataset.test_y)
    logger.info(f"Backbone held-out accuracy: {test_acc:.4f}")
    return params, test_acc
