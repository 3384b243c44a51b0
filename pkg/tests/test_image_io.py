"""
图像文件读写测试
"""

import io

import numpy as np
import png
import pytest

from esrkit.core.image_io import (
    decode_ppm,
    encode_png,
    encode_ppm,
    from_tensor,
    read_image,
    to_tensor,
    write_image,
)
from esrkit.exceptions import ImageFormatError


def _rgb(rng, h=5, w=7) -> np.ndarray:
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


class TestFiles:
    """PNG/PPM 文件测试"""

    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_round_trip(self, rng, tmp_path, suffix):
        """写入再读取得到相同像素"""
        img = _rgb(rng)
        path = write_image(tmp_path / f"img{suffix}", img)
        np.testing.assert_array_equal(read_image(path), img)

    def test_detect_by_content(self, rng, tmp_path):
        """按文件内容而非后缀识别格式"""
        img = _rgb(rng)
        path = tmp_path / "actually_png.ppm"
        path.write_bytes(encode_png(img))
        np.testing.assert_array_equal(read_image(path), img)

    def test_png_alpha_dropped(self, rng, tmp_path):
        """RGBA PNG 读取后丢弃 alpha 通道"""
        rgba = rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8)
        buffer = io.BytesIO()
        png.Writer(width=4, height=3, greyscale=False, alpha=True, bitdepth=8).write(buffer, rgba.reshape(3, 16))
        path = tmp_path / "rgba.png"
        path.write_bytes(buffer.getvalue())
        np.testing.assert_array_equal(read_image(path), rgba[:, :, :3])

    def test_png_greyscale_expanded(self, tmp_path):
        """灰度 PNG 扩展为三通道"""
        grey = np.array([[0, 128], [255, 7]], dtype=np.uint8)
        buffer = io.BytesIO()
        png.Writer(width=2, height=2, greyscale=True, bitdepth=8).write(buffer, grey)
        path = tmp_path / "grey.png"
        path.write_bytes(buffer.getvalue())
        img = read_image(path)
        assert img.shape == (2, 2, 3)
        np.testing.assert_array_equal(img[:, :, 1], grey)

    def test_unknown_format(self, tmp_path):
        """无法识别的文件内容"""
        path = tmp_path / "img.bmp"
        path.write_bytes(b"BM" + bytes(20))
        with pytest.raises(ImageFormatError):
            read_image(path)

    def test_unknown_suffix(self, rng, tmp_path):
        """不支持的写入后缀"""
        with pytest.raises(ImageFormatError):
            write_image(tmp_path / "img.jpg", _rgb(rng))

    def test_missing_file(self, tmp_path):
        """文件不存在"""
        with pytest.raises(OSError):
            read_image(tmp_path / "none.png")

    def test_wrong_array(self, tmp_path):
        """写入的数组必须是 uint8 RGB"""
        with pytest.raises(ImageFormatError):
            write_image(tmp_path / "a.png", np.zeros((4, 4, 3), dtype=np.float32))
        with pytest.raises(ImageFormatError):
            write_image(tmp_path / "a.png", np.zeros((4, 4), dtype=np.uint8))


class TestPpm:
    """PPM 解析测试"""

    def test_header_comments(self):
        """头部注释被跳过"""
        data = b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6])
        np.testing.assert_array_equal(decode_ppm(data), [[[1, 2, 3], [4, 5, 6]]])

    def test_small_maxval(self):
        """maxval < 255 时按比例放大"""
        data = b"P6 1 1 15\n" + bytes([15, 0, 8])
        np.testing.assert_array_equal(decode_ppm(data), [[[255, 0, 136]]])

    def test_sample_above_maxval(self):
        """像素值超过 maxval 时报错而不是回绕"""
        with pytest.raises(ImageFormatError, match="超过 maxval"):
            decode_ppm(b"P6 1 1 100\n" + bytes([200, 0, 0]))

    def test_sample_equal_maxval(self):
        """像素值等于 maxval 时映射为 255"""
        data = b"P6 1 1 100\n" + bytes([100, 50, 0])
        np.testing.assert_array_equal(decode_ppm(data), [[[255, 128, 0]]])

    def test_truncated(self):
        """像素数据截断"""
        with pytest.raises(ImageFormatError, match="截断"):
            decode_ppm(b"P6\n2 2\n255\n" + bytes(5))

    def test_ascii_ppm_rejected(self):
        """只支持二进制 P6"""
        with pytest.raises(ImageFormatError):
            decode_ppm(b"P3\n1 1\n255\n0 0 0\n")

    def test_encode_header(self, rng):
        """编码结果以标准头部开始"""
        assert encode_ppm(_rgb(rng, 2, 3)).startswith(b"P6\n3 2\n255\n")


class TestTensorConversion:
    """图像与张量转换测试"""

    def test_to_tensor(self, rng):
        """(H, W, 3) uint8 → (1, 3, H, W)，取值 [0, 1]"""
        img = _rgb(rng)
        x = to_tensor(img)
        assert x.shape == (1, 3, 5, 7)
        assert x.dtype == np.float32
        assert x[0, 1, 2, 3] == pytest.approx(img[2, 3, 1] / 255.0)

    def test_round_trip(self, rng):
        """转换为张量再转回得到原图"""
        img = _rgb(rng)
        np.testing.assert_array_equal(from_tensor(to_tensor(img)), img)
        np.testing.assert_array_equal(from_tensor(to_tensor(img, np.float64)), img)

    def test_from_tensor_clips_and_rounds(self):
        """越界截断，0.5 进位"""
        x = np.zeros((1, 3, 1, 3))
        x[0, :, 0, 0] = -0.2
        x[0, :, 0, 1] = 1.7
        x[0, :, 0, 2] = 0.5
        img = from_tensor(x)
        np.testing.assert_array_equal(img[0, :, 0], [0, 255, 128])

    def test_from_tensor_batch(self):
        """只能转换单张图像"""
        with pytest.raises(ImageFormatError):
            from_tensor(np.zeros((2, 3, 2, 2)))
