from chromagen.models.specs import (
    LATENT_DIM,
    ArchitectureSpec,
    LayerSpec,
    build_cnn_colorizer,
    build_conditional,
    build_cvae,
    build_cwgan_critic,
    build_cwgan_generator,
    build_decoder,
    build_encoder,
    compute_receptive_field,
    infer_shapes,
)
from chromagen.models.networks import (
    CNNColorizer,
    Conditional,
    Critic,
    Decoder,
    Encoder,
    Generator,
    LatentStats,
    SpecNetwork,
    build_network,
    count_parameters,
    init_parameters,
    reparameterize,
    require_double_backward,
)
