from .features import ItemStatsIndex, RankingData, build_ranking_data
from .model import (
    ABLATIONS,
    BLOCK_ROLES,
    BiDTAParams,
    FrozenItemInputs,
    MbaParams,
    RankerConfig,
    RankerParams,
    TABlock,
    bidirectional_attention,
    ctr_forward,
    ctr_logits,
    mba_forward,
    target_attention,
)
from .train import RankerHistory, ctr_loss, predict, sample_stream, train_ranker
