#include "mambaseg/image_io.hpp"

#include "mambaseg/errors.hpp"

#include <png.h>
// jpeglib.h relies on FILE and size_t being declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

namespace mambaseg {

namespace {

Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out;
  if (img.format & PNG_FORMAT_FLAG_COLOR) {
    img.format = (img.format & PNG_FORMAT_FLAG_ALPHA) ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
  } else {
    img.format = PNG_FORMAT_GRAY;
  }
  out.height = img.height;
  out.width = img.width;
  out.channels = PNG_IMAGE_PIXEL_CHANNELS(img.format);
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  std::array<char, JMSG_LENGTH_MAX> message{};
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message.data());
  std::longjmp(err->jump, 1);
}

// No C++ objects with destructors may live between setjmp and longjmp here.
bool decode_jpeg(std::FILE* file, Image& out, std::array<char, JMSG_LENGTH_MAX>& message) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    message = err.message;
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.height = cinfo.output_height;
  out.width = cinfo.output_width;
  out.channels = cinfo.output_components;
  out.pixels.resize(static_cast<std::size_t>(out.height * out.width * out.channels));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * out.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

Image read_jpeg(const std::filesystem::path& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw IoError("cannot open " + path.string());
  Image out;
  std::array<char, JMSG_LENGTH_MAX> message{};
  const bool ok = decode_jpeg(file, out, message);
  std::fclose(file);
  if (!ok) throw IoError("cannot decode JPEG " + path.string() + ": " + message.data());
  return out;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path.string());
  std::array<unsigned char, 8> sig{};
  probe.read(reinterpret_cast<char*>(sig.data()), sig.size());
  if (probe.gcount() >= 8 && png_sig_cmp(sig.data(), 0, 8) == 0) return read_png(path);
  if (probe.gcount() >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return read_jpeg(path);
  throw IoError("unsupported image format (expected PNG or JPEG): " + path.string());
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  switch (image.channels) {
    case 1: img.format = PNG_FORMAT_GRAY; break;
    case 3: img.format = PNG_FORMAT_RGB; break;
    case 4: img.format = PNG_FORMAT_RGBA; break;
    default: throw UsageError("write_png: unsupported channel count " + std::to_string(image.channels));
  }
  if (image.pixels.size() != static_cast<std::size_t>(image.height * image.width * image.channels)) {
    throw UsageError("write_png: pixel buffer size does not match extents");
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

std::vector<float> resize_bilinear(const std::vector<float>& src, Index channels, Index in_h, Index in_w, Index out_h,
                                   Index out_w) {
  std::vector<float> dst(static_cast<std::size_t>(channels * out_h * out_w));
  struct Tap {
    Index i0, i1;
    float f;
  };
  auto taps = [](Index in, Index out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
      const double s = std::clamp((static_cast<double>(o) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<Index>(std::floor(s));
      t[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), static_cast<float>(s - static_cast<double>(i0))};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h), tx = taps(in_w, out_w);
  for (Index c = 0; c < channels; ++c) {
    const float* plane = src.data() + c * in_h * in_w;
    float* out = dst.data() + c * out_h * out_w;
    for (Index y = 0; y < out_h; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (Index x = 0; x < out_w; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const float top = plane[a.i0 * in_w + b.i0] * (1 - b.f) + plane[a.i0 * in_w + b.i1] * b.f;
        const float bot = plane[a.i1 * in_w + b.i0] * (1 - b.f) + plane[a.i1 * in_w + b.i1] * b.f;
        out[y * out_w + x] = top * (1 - a.f) + bot * a.f;
      }
    }
  }
  return dst;
}

std::vector<float> resize_nearest(const std::vector<float>& src, Index channels, Index in_h, Index in_w, Index out_h,
                                  Index out_w) {
  std::vector<float> dst(static_cast<std::size_t>(channels * out_h * out_w));
  auto pick = [](Index o, Index in, Index out) {
    return std::min(in - 1, static_cast<Index>((static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                                               static_cast<double>(out)));
  };
  for (Index c = 0; c < channels; ++c) {
    for (Index y = 0; y < out_h; ++y) {
      const Index sy = pick(y, in_h, out_h);
      for (Index x = 0; x < out_w; ++x) {
        dst[static_cast<std::size_t>((c * out_h + y) * out_w + x)] =
            src[static_cast<std::size_t>((c * in_h + sy) * in_w + pick(x, in_w, out_w))];
      }
    }
  }
  return dst;
}

}  // namespace mambaseg
