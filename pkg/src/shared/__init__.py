# Tensor core, settings, logging and errors shared by the matting services
