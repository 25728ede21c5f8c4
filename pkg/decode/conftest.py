"""
テスト共通フィクスチャ
小さな設定で事前学習・拡張を 1 度だけ実行し、各テストで共有する
"""
import pytest

from decode.services.contlearn import run_expansion, run_pretrain
from decode.services.scenegen import generate_pretrain_mix
from decode.testutil import domain_scenes, tiny_config


@pytest.fixture(scope="session")
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def mix(config):
    dc = config.data
    return generate_pretrain_mix(dc.domains, dc.pretrain_weights, dc.n_pretrain, config.seed,
                                 t_p=dc.t_p, t_f=dc.t_f, dt=dc.dt, n_nb=dc.n_neighbors)


@pytest.fixture(scope="session")
def pretrained(config, mix):
    return run_pretrain(config, mix)


@pytest.fixture(scope="session")
def phase1(config, pretrained):
    return run_expansion(pretrained, domain_scenes(config, "arc", config.data.n_train), 1)


@pytest.fixture(scope="session")
def phase2(config, phase1):
    return run_expansion(phase1, domain_scenes(config, "straight", config.data.n_train), 2)


@pytest.fixture(scope="session")
def phase3(config, phase2):
    return run_expansion(phase2, domain_scenes(config, "turn", config.data.n_train), 3)
