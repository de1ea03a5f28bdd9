from .gradcheck import grad_check
from .network import Network, QFunction
from .optim import Adam, SGD

__all__ = ["Adam", "Network", "QFunction", "SGD", "grad_check"]
