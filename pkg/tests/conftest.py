"""
Shared pytest fixtures: tiny detector, tiny spectral index, tiny scenes, desk-scale bench
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import config as settings  # noqa: E402
from config import load_config_file  # noqa: E402
from cubes import (DataCube, ScenegenConfig, SceneCounts, build_attack_sets, synth_labeled_datasets,  # noqa: E402
                   synth_material_library)
from detector import ArchConfig, ConvSpec, TrainConfig, build_detector, train_two_stage  # noqa: E402
from evaluation import GridAssets  # noqa: E402
from grad import make_rng  # noqa: E402
from spectra import SpectralIndex, build_spectral_index, load_band_table, load_solar_spectrum  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if settings.RUN_SLOW_TESTS:
        return
    skip = pytest.mark.skip(reason="acceptance-scale; set ADVCUBE_RUN_SLOW=1")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_arch() -> ArchConfig:
    """16x16 input, two 4-channel conv layers with pooling, 6-unit hidden layer"""
    return ArchConfig(
        input_bands=[1, 2, 8],
        input_size=16,
        conv_specs=[ConvSpec(out_channels=4, kernel=3, stride=1, padding=1, pool=True),
                    ConvSpec(out_channels=4, kernel=3, stride=1, padding=1, pool=True)],
        dense_specs=[6, 1],
    )


@pytest.fixture
def tiny_detector(tiny_arch):
    return build_detector(tiny_arch, seed=3)


@pytest.fixture
def tiny_index() -> SpectralIndex:
    rng = make_rng(11, 'tiny-index')
    matrix = rng.uniform(0.05, 0.9, (settings.BAND_COUNT, 5))
    return SpectralIndex(matrix, tuple(f"paint_{q + 1:03d}" for q in range(5)))


@pytest.fixture
def tiny_scenegen() -> ScenegenConfig:
    return ScenegenConfig(
        size=16,
        seed=5,
        counts=SceneCounts(train=6, val=2, test=2, attack_train=3, attack_test=4),
        noise_octaves=2,
    )


@pytest.fixture
def tiny_scenes():
    """Four 16x16 cubes with hills and desert terrain tags"""
    rng = make_rng(7, 'tiny-scenes')
    kinds = ['hills', 'desert', 'hills', 'mixed']
    return [DataCube(rng.uniform(0.0, 0.4, (16, 16, settings.BAND_COUNT)).astype(np.float32), terrain=kind, seed=k)
            for k, kind in enumerate(kinds)]


class DeskBench:
    """Shipped-config detectors, spectral index and attack sets; each detector is trained on first use"""

    def __init__(self):
        self.scenegen = load_config_file(settings.DEFAULT_SCENEGEN_FILE, ScenegenConfig)
        self.index = build_spectral_index(synth_material_library(80, seed=0),
                                          load_solar_spectrum(settings.SOLAR_SPECTRUM_FILE),
                                          load_band_table(settings.BAND_TABLE_FILE))
        self._train = None
        self._detectors = {}
        self._attack_sets = {}

    def detector(self, name: str):
        if name not in self._detectors:
            if self._train is None:
                self._train = synth_labeled_datasets(self.scenegen, 'train', threads=settings.DEFAULT_THREADS)
            low, high = self.scenegen.thresholds
            arch = load_config_file(os.path.join(settings.CONFIG_DIR, f"arch_{name}.json"), ArchConfig)
            cfg = load_config_file(settings.DEFAULT_TRAIN_FILE, TrainConfig)
            self._detectors[name] = train_two_stage(build_detector(arch, cfg.seed), self._train[low],
                                                    self._train[high], cfg)
        return self._detectors[name]

    def assets(self, names) -> GridAssets:
        sizes = (self.scenegen.counts.attack_train, self.scenegen.counts.attack_test)
        for name in names:
            if name not in self._attack_sets:
                self._attack_sets[name] = build_attack_sets(self.scenegen, self.detector(name), sizes, None,
                                                            settings.DEFAULT_THREADS)
        return GridAssets({n: self.detector(n) for n in names}, self.index,
                          {n: self._attack_sets[n] for n in names})


@pytest.fixture(scope='session')
def desk_bench() -> DeskBench:
    return DeskBench()
