from twinpress.caching.environment import (
    CacheEnvironment,
    CacheState,
    CacheTopology,
    CachingConfig,
    CachingReport,
    RequestEvent,
    build_environment,
    simulate_request_stream,
    step_env,
    window_counts,
)
from twinpress.caching.policies import (
    BASELINES,
    VARIANTS,
    LFUPolicy,
    LRUPolicy,
    QPolicy,
    evaluate_caching,
    train_policy,
)
from twinpress.caching.shield import SafetyShield, safety_shield
from twinpress.caching.twin_generator import DemandTwin, twin_generate
