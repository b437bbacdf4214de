# Tests for the matting engine
