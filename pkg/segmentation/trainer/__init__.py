from segmentation.trainer.loss import cross_entropy_loss
from segmentation.trainer.optimizer import SgdConfig, TrainState, sgd_step
from segmentation.trainer.fit import TrainSample, fit
