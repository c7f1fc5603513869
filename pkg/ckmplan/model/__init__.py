from .builder import CkmModel, build_model, load_model
from .encoder import CnnEncoder, EncoderConfig
from .regressor import KanLayer, KanRegressor, MlpRegressor, RegressorConfig, count_parameters
