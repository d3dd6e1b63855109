#ifndef MSNIMBLE_TESTS_SUPPORT_HPP
#define MSNIMBLE_TESTS_SUPPORT_HPP

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "msnimble/common.hpp"

namespace testing {

inline std::string tmp_path(const std::string& dir_name, const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / dir_name;
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

/// Error class thrown by f, or "" if it returns normally.
inline std::string error_kind(const std::function<void()>& f, std::string* what = nullptr) {
    try {
        f();
    } catch (const msnimble::Error& e) {
        if (what) *what = e.what();
        return e.kind();
    }
    return "";
}

}  // namespace testing

#endif
