#include "swapprobe/image.hpp"

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <string>

#include <jpeglib.h>
#include <png.h>

#include "swapprobe/errors.hpp"

namespace swapprobe {

const char* sniff_mime(const Bytes& encoded) {
    static constexpr std::uint8_t kPng[] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (encoded.size() >= sizeof kPng && std::memcmp(encoded.data(), kPng, sizeof kPng) == 0)
        return "image/png";
    if (encoded.size() >= 3 && encoded[0] == 0xFF && encoded[1] == 0xD8 && encoded[2] == 0xFF)
        return "image/jpeg";
    return "";
}

namespace {

Image decode_png(const Bytes& encoded) {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, encoded.data(), encoded.size()))
        throw IoError(std::string("png header: ") + png.message);
    png.format = PNG_FORMAT_RGB;
    Image out(static_cast<int>(png.width), static_cast<int>(png.height));
    if (!png_image_finish_read(&png, nullptr, out.rgb.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw IoError("png data: " + msg);
    }
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

// Premature end of data is only a warning in libjpeg; escalate it.
void jpeg_emit_message(j_common_ptr cinfo, int level) {
    if (level < 0) jpeg_error_exit(cinfo);
}

Image decode_jpeg(const Bytes& encoded) {
    jpeg_decompress_struct cinfo;
    JpegErrorManager err;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    err.base.emit_message = jpeg_emit_message;
    Image out;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError(std::string("jpeg: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, encoded.data(), static_cast<unsigned long>(encoded.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    out = Image(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height));
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.pixel(0, static_cast<int>(cinfo.output_scanline));
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

}  // namespace

Image decode_image(const Bytes& encoded) {
    const std::string mime = sniff_mime(encoded);
    if (mime == "image/png") return decode_png(encoded);
    if (mime == "image/jpeg") return decode_jpeg(encoded);
    throw IoError("unrecognized image format");
}

Image load_image(const std::filesystem::path& path) {
    try {
        return decode_image(read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

Bytes encode_png(const Image& image) {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.rgb.data(), 0, nullptr))
        throw IoError(std::string("png encode: ") + png.message);
    Bytes out(size);
    if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.rgb.data(), 0, nullptr))
        throw IoError(std::string("png encode: ") + png.message);
    out.resize(size);
    return out;
}

void save_png(const Image& image, const std::filesystem::path& path) {
    const Bytes png = encode_png(image);
    write_file(path, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
}

}  // namespace swapprobe
