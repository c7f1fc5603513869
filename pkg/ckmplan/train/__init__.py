from .train import MODEL_KINDS, TrainConfig, TrainResult, evaluate_nmse, train
