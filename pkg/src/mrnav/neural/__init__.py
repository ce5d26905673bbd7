from .layers import DenseWeights, LstmLayerWeights
from .model import (Batch, ModelContractError, ModelWeights, backward, batch_loss_and_grad,
                    collate, forward, forward_batch, loss)
