#pragma once

#include <gtest/gtest.h>

#include <functional>

#include "aircache/error.hpp"

// Kind of the aircache::Error thrown by fn; fails the test if none is thrown.
inline aircache::ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const aircache::Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no aircache::Error thrown";
    return aircache::ErrorKind::Io;
}
