# 服务层
# Service layer: plant, linearization, solver, controllers, simulation
