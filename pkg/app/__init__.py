# 张拉整体脊柱模型预测控制
# Tensegrity Spine MPC - receding-horizon control of a cable-driven spine

__version__ = "1.0.0"
__description__ = "MPC of a tensegrity spine: nonlinear plant, CFTOC builders, interior-point QP"
