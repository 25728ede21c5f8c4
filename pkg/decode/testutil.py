"""
テスト用ヘルパ（縮小設定とドメイン別シーン生成）
"""
from decode.models import Config
from decode.services.scenegen import generate_domain


def tiny_config(**overrides) -> Config:
    """数秒で学習が終わる縮小設定"""
    data = {
        "seed": 11,
        "data": {"t_f": 10, "n_pretrain": 160, "n_train": 64, "n_val": 40},
        "model": {"d_h": 8, "n_modes": 3, "enc_hidden": 16, "dec_hidden": 8, "d_q": 4, "d_b": 4,
                  "trunk_hidden": [16], "chunk_dec": 64, "chunk_flow": 64, "flow_layers": 2, "flow_hidden": 8},
        "optim": {"batch_size": 32, "pretrain_epochs": 3, "expand_epochs": 2},
        "plan": {"eval_scenes": 40},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return Config.model_validate(data)


def acceptance_config() -> Config:
    """標準ドメイン・6 秒予測で 3 フェーズを学習する受け入れ試験用の設定"""
    return Config.model_validate({
        "seed": 7,
        "data": {"n_pretrain": 900, "n_train": 300, "n_val": 500},
        "model": {"d_h": 16, "n_modes": 6, "enc_hidden": 32, "dec_hidden": 16, "d_q": 8, "d_b": 8,
                  "trunk_hidden": [32], "chunk_dec": 128, "chunk_flow": 128, "flow_layers": 4, "flow_hidden": 16},
        "optim": {"batch_size": 32, "pretrain_epochs": 12, "expand_epochs": 40, "lr": 3e-3, "warm_epochs": 40},
        "plan": {"eval_scenes": 500},
    })


def domain_scenes(config: Config, name: str, n: int, seed_offset: int = 0):
    dc = config.data
    return generate_domain(dc.domain(name), n, config.seed + seed_offset, t_p=dc.t_p, t_f=dc.t_f, dt=dc.dt,
                           n_nb=dc.n_neighbors)
